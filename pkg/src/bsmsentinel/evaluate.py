"""Scoring of detector output against ground truth, and the full pipeline.

The pipeline order is ingest -> windowize -> calibrate -> detect -> score.
Confusion accounting is per (vehicle, window): a window is attack-positive
when any attack-labeled record of that vehicle falls inside it.

Decisions are held columnar (``DetectionLog``) so the default 200 s scenario
stays inside a real-time budget; the log behaves as a sequence of
``Detection`` values for any consumer that wants objects.
"""

from __future__ import annotations

import csv
import time
import warnings
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detectors import (
    DETECTOR_CUSUM,
    DETECTOR_EM,
    FEATURE_DISTANCE,
    FEATURE_MVS,
    FEATURE_MVT,
    FEATURES,
    CalibrationError,
    CusumParams,
    Detection,
    DetectorConfig,
    MixtureModel,
    cusum_calibrate,
    em_posterior_many,
    em_step,
    label_components,
    mixture_from_stats,
)
from .simulate import LabeledTrace
from .trace import (
    _KEY_SHIFT,
    _WINDOW_EPS,
    BsmRecord,
    FeatureSample,
    record_arrays,
    window_columns_from_arrays,
    window_index,
)

DECISIONS_HEADER = ("vehicle_id", "window_start", "feature", "detector", "decision", "score")

DETECTORS = (DETECTOR_CUSUM, DETECTOR_EM)

NO_ATTACK_KIND = "NONE"


class TraceMismatchError(ValueError):
    """Detections and labels do not describe the same trace."""


class CalibrationContaminationWarning(UserWarning):
    """The calibration interval contains attack-labeled records."""


class DetectionLog(SequenceABC):
    """Columnar sequence of ``Detection`` rows.

    Rows are ordered by (window_start, vehicle_id), then feature
    (MVS, MVT, DISTANCE), then detector (CUSUM, EM).
    """

    __slots__ = ("vehicle_id", "window_start", "feature", "detector", "flagged", "score")

    def __init__(self, vehicle_id, window_start, feature, detector, flagged, score):
        self.vehicle_id = vehicle_id
        self.window_start = window_start
        self.feature = feature  # int8 codes indexing FEATURES
        self.detector = detector  # int8 codes indexing DETECTORS
        self.flagged = flagged
        self.score = score

    @classmethod
    def empty(cls) -> "DetectionLog":
        z = np.empty(0)
        return cls(np.empty(0, np.int64), z, np.empty(0, np.int8),
                   np.empty(0, np.int8), np.empty(0, bool), z)

    def __len__(self) -> int:
        return len(self.vehicle_id)

    def _row(self, i: int) -> Detection:
        return Detection(
            int(self.vehicle_id[i]),
            float(self.window_start[i]),
            FEATURES[self.feature[i]],
            DETECTORS[self.detector[i]],
            "D" if self.flagged[i] else "ND",
            float(self.score[i]),
        )

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._row(j) for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._row(i)

    def __iter__(self):
        for vid, ws, f, d, flag, sc in zip(
            self.vehicle_id.tolist(),
            self.window_start.tolist(),
            self.feature.tolist(),
            self.detector.tolist(),
            self.flagged.tolist(),
            self.score.tolist(),
        ):
            yield Detection(vid, ws, FEATURES[f], DETECTORS[d], "D" if flag else "ND", sc)


@dataclass
class MetricsCell:
    attack_kind: str
    detector: str
    feature: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    false_positive_rate: float
    false_negative_rate: float
    latency_seconds: Optional[float]
    latency_windows: Optional[int]


@dataclass
class MetricsReport:
    cells: List[MetricsCell]
    window_len: float
    throughput: Optional[float] = None  # observations/second, timing-dependent


GroundTruth = Dict[Tuple[int, int], Optional[str]]


def ground_truth(
    records: Sequence[BsmRecord],
    labels: Sequence[Optional[str]],
    window_len: float,
) -> Tuple[GroundTruth, Dict[str, float]]:
    """Per-(vehicle, window) attack kind (None = normal) and per-kind onset."""
    records = records if isinstance(records, list) else list(records)
    n = len(records)
    if n == 0:
        return {}, {}
    ts = np.fromiter((r.timestamp for r in records), float, count=n)
    vid = np.fromiter((r.vehicle_id for r in records), np.int64, count=n)
    wi = np.floor(ts / window_len + _WINDOW_EPS).astype(np.int64)
    truth: GroundTruth = {}
    onsets: Dict[str, float] = {}
    for v, w, kind, t in zip(vid.tolist(), wi.tolist(), labels, ts.tolist()):
        key = (v, w)
        if kind is None:
            if key not in truth:
                truth[key] = None
        else:
            truth[key] = kind
            prev = onsets.get(kind)
            if prev is None or t < prev:
                onsets[kind] = t
    return truth, onsets


def ground_truth_rows(
    rows: Sequence[Tuple[float, int, Optional[str]]],
    window_len: float,
) -> Tuple[GroundTruth, Dict[str, float]]:
    """Same as ``ground_truth`` but from (timestamp, vehicle_id, kind) rows,
    as read back from a labels CSV."""
    truth: GroundTruth = {}
    onsets: Dict[str, float] = {}
    for ts, vid, kind in rows:
        key = (vid, window_index(ts, window_len))
        if kind is None:
            truth.setdefault(key, None)
        else:
            truth[key] = kind
            if kind not in onsets or ts < onsets[kind]:
                onsets[kind] = ts
    return truth, onsets


def _ground_truth_arrays(ts, vid, wi, labels):
    """Packed-key ground truth: (base, sorted keys, per-key class codes,
    kinds, onsets). Class code -1 is normal; otherwise an index into kinds."""
    kinds = sorted({k for k in labels if k is not None})
    base = int(vid.min())
    key = ((vid - base) << _KEY_SHIFT) + wi
    order = np.argsort(key, kind="stable")
    uniq, start = np.unique(key[order], return_index=True)
    onsets: Dict[str, float] = {}
    if kinds:
        code = {k: i for i, k in enumerate(kinds)}
        lab = np.fromiter(
            (-1 if k is None else code[k] for k in labels), np.int8, count=len(labels)
        )
        cls = np.maximum.reduceat(lab[order], start).astype(np.int8)
        for kind, c in code.items():
            onsets[kind] = float(ts[lab == c].min())
    else:
        cls = np.full(len(uniq), -1, np.int8)
    return base, uniq, cls, kinds, onsets


def _make_cell(kind, detector, feature, tp, fp, tn, fn, first_d, onsets, window_len):
    total = tp + fp + tn + fn
    accuracy = 1.0 - (fp + fn) / total if total else 1.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    fnr = fn / (fn + tp) if (fn + tp) else 0.0
    latency_s = latency_w = None
    if kind in onsets and first_d is not None:
        onset = onsets[kind]
        latency_s = max(0.0, first_d - onset)
        latency_w = window_index(first_d, window_len) - window_index(onset, window_len)
    return MetricsCell(
        attack_kind=kind,
        detector=detector,
        feature=feature,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=accuracy,
        false_positive_rate=fpr,
        false_negative_rate=fnr,
        latency_seconds=latency_s,
        latency_windows=latency_w,
    )


def _score_columns_core(
    log: DetectionLog,
    base: int,
    t_key: np.ndarray,
    t_cls: np.ndarray,
    kinds: List[str],
    onsets: Dict[str, float],
    window_len: float,
    throughput: Optional[float],
    d_key: Optional[np.ndarray] = None,
) -> MetricsReport:
    if not kinds:
        kinds = [NO_ATTACK_KIND]
    n = len(log)
    if n == 0:
        return MetricsReport(cells=[], window_len=window_len, throughput=throughput)
    if d_key is None:
        wi = np.floor(log.window_start / window_len + _WINDOW_EPS).astype(np.int64)
        d_key = ((log.vehicle_id - base) << _KEY_SHIFT) + wi
    pos = np.searchsorted(t_key, d_key)
    ok = (pos < len(t_key)) & (t_key[np.minimum(pos, len(t_key) - 1)] == d_key)
    if not bool(ok.all()):
        bad = int(np.argmin(ok))
        raise TraceMismatchError(
            "detection references unknown (vehicle, window): "
            f"({int(log.vehicle_id[bad])}, "
            f"{int(d_key[bad] - ((d_key[bad] >> _KEY_SHIFT) << _KEY_SHIFT))})"
        )
    cls = t_cls[pos]
    kind_code = {kind: i for i, kind in enumerate(kinds)}

    cells: List[MetricsCell] = []
    for detector in sorted(DETECTORS):
        d_code = DETECTORS.index(detector)
        d_mask = log.detector == d_code
        for feature in sorted(FEATURES):
            f_code = FEATURES.index(feature)
            mask = d_mask & (log.feature == f_code)
            if not bool(mask.any()):
                continue
            m_cls = cls[mask]
            m_flag = log.flagged[mask]
            m_ws = log.window_start[mask]
            neg = m_cls == -1
            fp = int(np.count_nonzero(neg & m_flag))
            tn = int(np.count_nonzero(neg & ~m_flag))
            for kind in kinds:
                pos_mask = m_cls == kind_code.get(kind, -2)
                tp = int(np.count_nonzero(pos_mask & m_flag))
                fn = int(np.count_nonzero(pos_mask & ~m_flag))
                hits = m_ws[pos_mask & m_flag]
                first_d = float(hits.min()) if hits.size else None
                cells.append(
                    _make_cell(kind, detector, feature, tp, fp, tn, fn,
                               first_d, onsets, window_len)
                )
    cells.sort(key=lambda c: (c.detector, c.feature, c.attack_kind))
    return MetricsReport(cells=cells, window_len=window_len, throughput=throughput)


def _score_columns(
    log: DetectionLog,
    truth: GroundTruth,
    onsets: Dict[str, float],
    window_len: float,
    throughput: Optional[float],
) -> MetricsReport:
    """Adapter from a dict-shaped ground truth to the packed-array scorer."""
    kinds = sorted(onsets) if onsets else [NO_ATTACK_KIND]
    if not truth:
        return MetricsReport(cells=[], window_len=window_len, throughput=throughput)
    t_vid = np.fromiter((k[0] for k in truth), np.int64, count=len(truth))
    t_wi = np.fromiter((k[1] for k in truth), np.int64, count=len(truth))
    base = int(t_vid.min())
    kind_code = {kind: i for i, kind in enumerate(kinds)}
    t_cls = np.fromiter(
        (-1 if v is None else kind_code.get(v, -2) for v in truth.values()),
        np.int8,
        count=len(truth),
    )
    t_key = ((t_vid - base) << _KEY_SHIFT) + t_wi
    order = np.argsort(t_key)
    return _score_columns_core(
        log, base, t_key[order], t_cls[order], kinds, onsets,
        window_len, throughput,
    )


def score(
    detections: Sequence[Detection],
    truth: GroundTruth,
    onsets: Dict[str, float],
    window_len: float,
    throughput: Optional[float] = None,
) -> MetricsReport:
    """Fold detections into per-(attack_kind, detector, feature) metrics.

    Windows labeled with a different attack kind than the cell's are excluded
    from that cell's confusion counts. Latency is the gap from attack onset
    to the first D on an attack window of that kind.
    """
    if isinstance(detections, DetectionLog):
        return _score_columns(detections, truth, onsets, window_len, throughput)
    kinds = sorted(onsets) if onsets else [NO_ATTACK_KIND]
    # (detector, feature, kind) -> [tp, fp, tn, fn, first_d_window_start]
    acc: Dict[Tuple[str, str, str], list] = {}
    for det in detections:
        key = (det.vehicle_id, window_index(det.window_start, window_len))
        if key not in truth:
            raise TraceMismatchError(
                f"detection references unknown (vehicle, window): {key}"
            )
        actual = truth[key]
        flagged = det.decision == "D"
        for kind in kinds:
            cell = acc.setdefault((det.detector, det.feature_name, kind), [0, 0, 0, 0, None])
            if actual == kind:
                if flagged:
                    cell[0] += 1
                    if cell[4] is None or det.window_start < cell[4]:
                        cell[4] = det.window_start
                else:
                    cell[3] += 1
            elif actual is None:
                if flagged:
                    cell[1] += 1
                else:
                    cell[2] += 1
            # windows carrying a different attack kind are out of this cell's scope
    cells = [
        _make_cell(kind, detector, feature, tp, fp, tn, fn, first_d, onsets, window_len)
        for (detector, feature, kind), (tp, fp, tn, fn, first_d) in sorted(acc.items())
    ]
    return MetricsReport(cells=cells, window_len=window_len, throughput=throughput)


@dataclass
class CalibrationResult:
    cusum_params: Dict[str, CusumParams]
    mixtures: Dict[str, MixtureModel]
    n_samples: Dict[str, int]


def calibrate_from_values(values: Dict[str, Sequence[float]], cfg: DetectorConfig) -> CalibrationResult:
    """Per-feature CUSUM parameters plus the initial mixture, from raw
    calibration-interval feature values."""
    params: Dict[str, CusumParams] = {}
    mixtures: Dict[str, MixtureModel] = {}
    counts: Dict[str, int] = {}
    for feature in FEATURES:
        vals = list(values[feature])
        if len(vals) < 2:
            raise CalibrationError(
                f"feature {feature}: {len(vals)} calibration sample(s); need >= 2"
            )
        p = cusum_calibrate(
            vals,
            n_sigma=cfg.n_sigma,
            k_rule=cfg.k_rule,
            one_sided=cfg.one_sided,
            reset_on_detect=cfg.reset_on_detect,
        )
        model = mixture_from_stats(p.mu0, p.sigma**2)
        if cfg.em_fit_iters > 0:
            arr = np.asarray(vals, dtype=float)
            for _ in range(cfg.em_fit_iters):
                model = em_step(model, arr)
            model = label_components(model, p.mu0)
        params[feature] = p
        mixtures[feature] = model
        counts[feature] = len(vals)
    return CalibrationResult(cusum_params=params, mixtures=mixtures, n_samples=counts)


def calibrate_from_samples(
    samples: Sequence[FeatureSample], first_flags: Sequence[bool], cfg: DetectorConfig
) -> CalibrationResult:
    """Calibrate from the leading interval of a windowed sample sequence.

    A vehicle's first window is excluded from the displacement stream (its
    displacement is a fill-in zero)."""
    calib_end = cfg.calibration_window_seconds
    values = {f: [] for f in FEATURES}
    for s, first in zip(samples, first_flags):
        if s.window_start >= calib_end:
            continue
        values[FEATURE_MVS].append(s.mvs)
        values[FEATURE_MVT].append(float(s.mvt))
        if not first:
            values[FEATURE_DISTANCE].append(s.displacement)
    return calibrate_from_values(values, cfg)


def _cusum_vehicle_pass(y: np.ndarray, p: CusumParams, flags, scores) -> None:
    """Tabular CUSUM over one vehicle's stream, writing into ``flags``/``scores``.

    Uses the prefix-sum identity c_i = P_i - min(0, min_{j<=i} P_j) for the
    floor-at-zero recurrence, restarting after each detection when
    ``reset_on_detect`` is set. Scores are max(C+, C-)/h after the update
    that produced the decision.
    """
    inc_p = y - (p.mu0 + p.k)
    inc_m = None if p.one_sided else (p.mu0 - p.k) - y
    h = p.h
    i = 0
    n = len(y)
    while i < n:
        pp = np.cumsum(inc_p[i:])
        c = pp - np.minimum(np.minimum.accumulate(pp), 0.0)
        if inc_m is not None:
            pm = np.cumsum(inc_m[i:])
            cm = pm - np.minimum(np.minimum.accumulate(pm), 0.0)
            np.maximum(c, cm, out=c)
        scores[i:] = c / h
        over = c > h
        if not p.reset_on_detect:
            flags[i:] = over
            return
        if not over.any():
            flags[i:] = False
            return
        hit = int(np.argmax(over))
        flags[i:i + hit] = False
        flags[i + hit] = True
        i += hit + 1


def run_pipeline(
    trace: LabeledTrace,
    cfg: Optional[DetectorConfig] = None,
    window_len: float = 0.1,
) -> Tuple[DetectionLog, MetricsReport]:
    """Run both detectors over all three features for every vehicle stream."""
    cfg = cfg if cfg is not None else DetectorConfig()
    t0 = time.perf_counter()

    ts, vid, lat, lon = record_arrays(trace.records)
    cols = window_columns_from_arrays(ts, vid, lat, lon, window_len)
    n = len(cols)
    if n == 0:
        return DetectionLog.empty(), MetricsReport(cells=[], window_len=window_len)

    wi_rec = np.floor(ts / window_len + _WINDOW_EPS).astype(np.int64)
    base, t_key, t_cls, kinds, onsets = _ground_truth_arrays(
        ts, vid, wi_rec, trace.labels
    )

    if kinds and min(onsets.values()) < cfg.calibration_window_seconds:
        message = "calibration interval contains attack-labeled records"
        if cfg.calibration_policy == "error":
            raise CalibrationError(message)
        warnings.warn(message, CalibrationContaminationWarning)

    calib_mask = cols.window_start < cfg.calibration_window_seconds
    calib = calibrate_from_values(
        {
            FEATURE_MVS: cols.mvs[calib_mask].tolist(),
            FEATURE_MVT: cols.mvt[calib_mask].astype(float).tolist(),
            FEATURE_DISTANCE: cols.displacement[calib_mask & ~cols.first].tolist(),
        },
        cfg,
    )

    feature_values = {
        FEATURE_MVS: cols.mvs,
        FEATURE_MVT: cols.mvt.astype(float),
        FEATURE_DISTANCE: cols.displacement,
    }

    # regroup into per-vehicle streams (stable sort keeps time order)
    veh_order = np.argsort(cols.vehicle_id, kind="stable")
    cut = np.nonzero(np.diff(cols.vehicle_id[veh_order]))[0] + 1
    starts = np.concatenate(([0], cut)).tolist()
    ends = np.concatenate((cut, [n])).tolist()

    flag_mat = np.empty((n, 6), bool)
    score_mat = np.empty((n, 6))
    for f_idx, feature in enumerate(FEATURES):
        values = feature_values[feature]
        if not bool(np.isfinite(values).all()):
            raise ValueError(f"non-finite {feature} observation in stream")
        y_perm = values[veh_order]
        f_perm = np.empty(n, bool)
        s_perm = np.empty(n)
        p = calib.cusum_params[feature]
        for s, e in zip(starts, ends):
            _cusum_vehicle_pass(y_perm[s:e], p, f_perm[s:e], s_perm[s:e])
        flag_mat[veh_order, 2 * f_idx] = f_perm
        score_mat[veh_order, 2 * f_idx] = s_perm

        posterior = em_posterior_many(calib.mixtures[feature], values)
        flag_mat[:, 2 * f_idx + 1] = posterior > cfg.em_threshold
        score_mat[:, 2 * f_idx + 1] = posterior

    keep = np.ones((n, 6), bool)
    keep[cols.first, 4:] = False  # a vehicle's first window has no displacement

    keep_flat = keep.ravel()
    log = DetectionLog(
        vehicle_id=np.repeat(cols.vehicle_id, 6)[keep_flat],
        window_start=np.repeat(cols.window_start, 6)[keep_flat],
        feature=np.tile(np.array([0, 0, 1, 1, 2, 2], np.int8), n)[keep_flat],
        detector=np.tile(np.array([0, 1, 0, 1, 0, 1], np.int8), n)[keep_flat],
        flagged=flag_mat.ravel()[keep_flat],
        score=score_mat.ravel()[keep_flat],
    )
    d_key = np.repeat(
        ((cols.vehicle_id - base) << _KEY_SHIFT) + cols.window_index, 6
    )[keep_flat]

    elapsed = time.perf_counter() - t0
    throughput = n / elapsed if elapsed > 0 else None

    report = _score_columns_core(
        log, base, t_key, t_cls, kinds, onsets, window_len,
        throughput, d_key=d_key,
    )
    return log, report


def write_decisions_csv(path, detections: Sequence[Detection]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DECISIONS_HEADER)
        for det in detections:
            writer.writerow(
                [
                    det.vehicle_id,
                    repr(det.window_start),
                    det.feature_name,
                    det.detector,
                    det.decision,
                    repr(det.score),
                ]
            )


def read_decisions_csv(path) -> List[Detection]:
    detections: List[Detection] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        idx = {name.strip().lower(): i for i, name in enumerate(header)}
        for row in reader:
            if not row:
                continue
            detections.append(
                Detection(
                    vehicle_id=int(row[idx["vehicle_id"]]),
                    window_start=float(row[idx["window_start"]]),
                    feature_name=row[idx["feature"]],
                    detector=row[idx["detector"]],
                    decision=row[idx["decision"]],
                    score=float(row[idx["score"]]),
                )
            )
    return detections


def format_table(report: MetricsReport) -> str:
    lines = [
        f"{'kind':<14}{'detector':<9}{'feature':<10}{'acc':>8}{'fpr':>8}"
        f"{'fnr':>8}{'lat(s)':>9}{'lat(w)':>7}"
    ]
    for c in report.cells:
        lat_s = "-" if c.latency_seconds is None else f"{c.latency_seconds:.3f}"
        lat_w = "-" if c.latency_windows is None else str(c.latency_windows)
        lines.append(
            f"{c.attack_kind:<14}{c.detector:<9}{c.feature:<10}"
            f"{c.accuracy:>8.4f}{c.false_positive_rate:>8.4f}"
            f"{c.false_negative_rate:>8.4f}{lat_s:>9}{lat_w:>7}"
        )
    if report.throughput is not None:
        lines.append(f"throughput: {report.throughput:.0f} obs/s")
    return "\n".join(lines)


def to_machine(report: MetricsReport) -> str:
    """Key-value serialization; the throughput line is the only timing field."""
    lines = [f"window_len = {report.window_len!r}"]
    for c in report.cells:
        prefix = f"{c.attack_kind}.{c.detector}.{c.feature}"
        lines.append(f"{prefix}.tp = {c.tp}")
        lines.append(f"{prefix}.fp = {c.fp}")
        lines.append(f"{prefix}.tn = {c.tn}")
        lines.append(f"{prefix}.fn = {c.fn}")
        lines.append(f"{prefix}.accuracy = {c.accuracy!r}")
        lines.append(f"{prefix}.false_positive_rate = {c.false_positive_rate!r}")
        lines.append(f"{prefix}.false_negative_rate = {c.false_negative_rate!r}")
        lines.append(
            f"{prefix}.latency_seconds = "
            + ("" if c.latency_seconds is None else repr(c.latency_seconds))
        )
        lines.append(
            f"{prefix}.latency_windows = "
            + ("" if c.latency_windows is None else str(c.latency_windows))
        )
    if report.throughput is not None:
        lines.append(f"throughput = {report.throughput!r}")
    return "\n".join(lines) + "\n"
