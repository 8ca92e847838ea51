"""Teacher signal sources for training: a synthetic oracle matcher plus a
binary interchange format for precomputed detector/matcher outputs.

Record files come in pairs: `<path>` holds raw little-endian float32 blocks
behind a one-line ASCII header, `<path>.idx` is a line-delimited text index
with one record per line:

    sample_id n_interest_l n_interest_r m n rows cols offset

Per record the binary payload is, in order: interest_l (n_interest_l x 3:
x, y, score), interest_r, points_l (m x 3), points_r (n x 3), and the
reference assignment (rows x cols, row-major) where rows == m+1 and
cols == n+1.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import interest as interest_mod
from .correspondence import DEFAULT_MATCH_EPS, MatchGT, build_gt_matches
from .decoders import Assignment, sinkhorn_normalize
from .errors import ContractError, LoadError
from .interest import InterestMap, PointSet
from .synthgen import StereoSample

log = logging.getLogger(__name__)

MAGIC = b"STDTCH01 float32 little\n"
SCORE_FLOOR = -50.0  # log-space floor keeping Sinkhorn away from -inf lines
CLAMP_TOL = 1e-6


@dataclass
class TeacherRecord:
    sample_id: str
    interest_l: np.ndarray  # (k, 3) float32: x, y, score at labeled pixels
    interest_r: np.ndarray
    points_l: np.ndarray    # (m, 3) float32
    points_r: np.ndarray    # (n, 3) float32
    assignment: np.ndarray  # (m+1, n+1) float32

    def point_set(self, view: str) -> PointSet:
        arr = self.points_l if view == "left" else self.points_r
        return PointSet(arr[:, :2].astype(np.float64), arr[:, 2].astype(np.float64))


def oracle_matcher(p_l: PointSet, p_r: PointSet, gt: MatchGT, tau: float = 1.0,
                   iters: int = 100) -> Assignment:
    """Soft reference assignment built from ground-truth matches.

    A matched left point spreads Gaussian mass exp(-dist^2/tau^2) over right
    points near its true counterpart; unmatched points put their mass on the
    dustbins; excluded points get an uninformative uniform line. The scores
    are normalized with the slack Sinkhorn, and tau -> 0 recovers the hard
    one-hot structure. The matrix is cast to float32 so that live use and a
    record round trip are bit-identical.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    m, n = len(p_l), len(p_r)
    scores = np.full((m + 1, n + 1), SCORE_FLOOR, dtype=np.float64)
    for i in sorted(gt.excluded_l):
        scores[i, :] = 0.0
    for j in sorted(gt.excluded_r):
        scores[:, j] = 0.0
    for i, j_star in gt.pairs:
        anchor = p_r.coords[j_star]
        d2 = ((p_r.coords - anchor) ** 2).sum(axis=1)
        scores[i, :n] = np.maximum(-d2 / (tau * tau), SCORE_FLOOR)
    for i in sorted(gt.unmatched_l):
        scores[i, n] = 0.0
    for j in sorted(gt.unmatched_r):
        scores[m, j] = 0.0
    scores[m, n] = float("-inf")
    normalized = sinkhorn_normalize(torch.from_numpy(scores), iters,
                                    constrain_dustbins=False)
    return Assignment(normalized.matrix.to(torch.float32))


def _interest_sparse(imap: InterestMap) -> np.ndarray:
    ys, xs = np.nonzero(imap.labels)
    out = np.zeros((len(ys), 3), dtype=np.float32)
    out[:, 0] = xs
    out[:, 1] = ys
    out[:, 2] = imap.probs[ys, xs]
    return out


def interest_labels_map(sparse: np.ndarray, shape) -> np.ndarray:
    """Rebuild the boolean label map from a record's sparse interest list."""
    labels = np.zeros(shape, dtype=bool)
    for x, y, _ in np.asarray(sparse).reshape(-1, 3):
        labels[int(round(float(y))), int(round(float(x)))] = True
    return labels


def _points_array(points: PointSet) -> np.ndarray:
    out = np.zeros((len(points), 3), dtype=np.float32)
    if len(points):
        out[:, :2] = points.coords
        out[:, 2] = points.scores
    return out


def detect_interest(sample: StereoSample, view: str, detector: str = "oracle",
                    **harris_kwargs) -> InterestMap:
    """Teacher detector dispatch: 'oracle' reads the sample's junction
    labels, 'harris' runs the classical corner response on the image."""
    image = sample.left if view == "left" else sample.right
    if detector == "oracle":
        points = sample.oracle_points_l if view == "left" else sample.oracle_points_r
        return interest_mod.interest_map_from_points(points, image.shape)
    if detector == "harris":
        return interest_mod.harris_interest_map(image, **harris_kwargs)
    raise ContractError(f"unknown detector {detector!r} (use 'oracle' or 'harris')")


def build_teacher_record(sample_id: str, sample: StereoSample, detector: str = "oracle",
                         nms_radius: int = interest_mod.DEFAULT_NMS_RADIUS,
                         nms_threshold: float = interest_mod.DEFAULT_THRESHOLD,
                         max_points: int = interest_mod.DEFAULT_MAX_POINTS,
                         tau: float = 1.0, match_eps: float = DEFAULT_MATCH_EPS,
                         sinkhorn_iters: int = 100) -> TeacherRecord:
    imap_l = detect_interest(sample, "left", detector)
    imap_r = detect_interest(sample, "right", detector)
    p_l = interest_mod.nms_filter(imap_l, nms_radius, nms_threshold, max_points)
    p_r = interest_mod.nms_filter(imap_r, nms_radius, nms_threshold, max_points)
    if len(p_l) and len(p_r):
        gt = build_gt_matches(p_l, p_r, sample.disparity, sample.valid_mask,
                              sample.occ_mask, match_eps)
        assignment = oracle_matcher(p_l, p_r, gt, tau, sinkhorn_iters).matrix.numpy()
    else:
        assignment = np.zeros((len(p_l) + 1, len(p_r) + 1), dtype=np.float32)
    return TeacherRecord(
        sample_id=sample_id,
        interest_l=_interest_sparse(imap_l),
        interest_r=_interest_sparse(imap_r),
        points_l=_points_array(p_l),
        points_r=_points_array(p_r),
        assignment=np.ascontiguousarray(assignment, dtype=np.float32),
    )


def export_teacher_records(records, path) -> None:
    """Write records to `path` (binary) and `path.idx` (text index)."""
    with open(path, "wb") as bin_f, open(str(path) + ".idx", "w") as idx_f:
        bin_f.write(MAGIC)
        for rec in records:
            m, n = len(rec.points_l), len(rec.points_r)
            rows, cols = rec.assignment.shape
            offset = bin_f.tell()
            for block in (rec.interest_l, rec.interest_r, rec.points_l,
                          rec.points_r, rec.assignment):
                bin_f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
            idx_f.write(f"{rec.sample_id} {len(rec.interest_l)} {len(rec.interest_r)} "
                        f"{m} {n} {rows} {cols} {offset}\n")


def load_teacher_records(path, expected_ids=None):
    """Yield validated TeacherRecords; `expected_ids` (if given) must match
    the stored ids in order."""
    idx_path = str(path) + ".idx"
    if not os.path.exists(idx_path):
        raise LoadError(f"missing index file {idx_path}")
    lines = []
    with open(idx_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise LoadError(f"{idx_path}:{lineno}: expected 8 fields, got {len(parts)}")
            lines.append((parts[0], *map(int, parts[1:])))
    if expected_ids is not None:
        stored = [entry[0] for entry in lines]
        if list(expected_ids) != stored:
            raise LoadError(
                f"record ids do not align with the dataset manifest "
                f"(records {stored[:3]}..., expected {list(expected_ids)[:3]}...)")
    with open(path, "rb") as f:
        header = f.read(len(MAGIC))
        if header != MAGIC:
            raise LoadError(f"{path}: bad magic header {header!r}")
        for sample_id, a_l, a_r, m, n, rows, cols, offset in lines:
            if rows != m + 1 or cols != n + 1:
                raise LoadError(
                    f"sample {sample_id}: assignment {rows}x{cols} does not match "
                    f"point counts ({m},{n})")
            f.seek(offset)
            count = 3 * (a_l + a_r + m + n) + rows * cols
            payload = f.read(count * 4)
            if len(payload) != count * 4:
                raise LoadError(f"sample {sample_id}: truncated payload")
            flat = np.frombuffer(payload, dtype="<f4")
            pos = 0

            def take(num, shape):
                nonlocal pos
                block = flat[pos:pos + num].reshape(shape).astype(np.float32)
                pos += num
                return block

            rec = TeacherRecord(
                sample_id=sample_id,
                interest_l=take(3 * a_l, (a_l, 3)),
                interest_r=take(3 * a_r, (a_r, 3)),
                points_l=take(3 * m, (m, 3)),
                points_r=take(3 * n, (n, 3)),
                assignment=take(rows * cols, (rows, cols)),
            )
            _validate_assignment(rec)
            yield rec


def _validate_assignment(rec: TeacherRecord) -> None:
    a = rec.assignment
    if not np.isfinite(a).all():
        raise LoadError(f"sample {rec.sample_id}: non-finite assignment entries")
    low, high = float(a.min()), float(a.max())
    if low < -CLAMP_TOL or high > 1.0 + CLAMP_TOL:
        raise LoadError(
            f"sample {rec.sample_id}: assignment entries outside [0,1] "
            f"(min {low}, max {high})")
    if low < 0.0 or high > 1.0:
        log.warning("sample %s: clamping assignment entries within %.0e of [0,1]",
                    rec.sample_id, CLAMP_TOL)
        np.clip(a, 0.0, 1.0, out=a)
