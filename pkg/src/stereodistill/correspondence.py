"""Ground-truth interest-point matching by disparity warping.

A left point is warped to the right view by the disparity sampled at its
sub-pixel location; right points inside an eps box around the warped
location are match candidates. Candidate pairs are assigned greedily by
ascending Euclidean distance (ties: lower left index, then lower right
index), which pairs mutually nearest candidates first and enforces
one-to-one matching.

Point partition per side:
  * pairs      — matched across views,
  * unmatched  — certifiably without a counterpart (occluded, or no
                 candidate near the warp),
  * excluded   — no usable ground truth (left: no valid disparity in the
                 bilinear footprint; right: some excluded left point on the
                 same row could still reach it, so "unmatched" cannot be
                 certified).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .interest import PointSet

DEFAULT_MATCH_EPS = 1.0


@dataclass
class MatchGT:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_l: set[int] = field(default_factory=set)
    unmatched_r: set[int] = field(default_factory=set)
    excluded_l: set[int] = field(default_factory=set)
    excluded_r: set[int] = field(default_factory=set)

    def validate(self, m: int, n: int) -> None:
        left_used = [i for i, _ in self.pairs]
        right_used = [j for _, j in self.pairs]
        if len(set(left_used)) != len(left_used) or len(set(right_used)) != len(right_used):
            raise ContractError("a point appears in more than one pair")
        left_groups = (set(left_used), self.unmatched_l, self.excluded_l)
        right_groups = (set(right_used), self.unmatched_r, self.excluded_r)
        for groups, count, side in ((left_groups, m, "left"), (right_groups, n, "right")):
            total = set().union(*groups)
            if total != set(range(count)) or sum(len(g) for g in groups) != count:
                raise ContractError(f"{side} indices do not partition 0..{count - 1}")

    def normalized(self) -> "MatchGT":
        return MatchGT(sorted(self.pairs), set(self.unmatched_l), set(self.unmatched_r),
                       set(self.excluded_l), set(self.excluded_r))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MatchGT):
            return NotImplemented
        a, b = self.normalized(), other.normalized()
        return (a.pairs == b.pairs and a.unmatched_l == b.unmatched_l
                and a.unmatched_r == b.unmatched_r and a.excluded_l == b.excluded_l
                and a.excluded_r == b.excluded_r)


def _check_shapes(disparity, valid_mask, occ_mask):
    disparity = np.asarray(disparity, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    occ_mask = np.asarray(occ_mask, dtype=bool)
    if disparity.ndim != 2 or valid_mask.shape != disparity.shape \
            or occ_mask.shape != disparity.shape:
        raise ContractError(
            f"disparity/valid/occ shapes disagree: {disparity.shape}, "
            f"{valid_mask.shape}, {occ_mask.shape}")
    return disparity, valid_mask, occ_mask


def sample_disparity_bilinear(disparity, valid_mask, x: float, y: float):
    """Bilinear disparity at (x, y) over valid pixels; None if the footprint
    holds no valid disparity. Invalid corners are dropped and the remaining
    weights renormalized."""
    disparity = np.asarray(disparity, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    height, width = disparity.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total_w = 0.0
    total_d = 0.0
    for (iy, ix, w) in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
        if w <= 0.0 or not (0 <= iy < height and 0 <= ix < width):
            continue
        if valid_mask[iy, ix]:
            total_w += w
            total_d += w * disparity[iy, ix]
    if total_w <= 0.0:
        return None
    return total_d / total_w


def _nearest_pixel(x: float, y: float, height: int, width: int):
    ix = min(max(int(np.floor(x + 0.5)), 0), width - 1)
    iy = min(max(int(np.floor(y + 0.5)), 0), height - 1)
    return iy, ix


def build_gt_matches(p_l: PointSet, p_r: PointSet, disparity, valid_mask, occ_mask,
                     eps: float = DEFAULT_MATCH_EPS) -> MatchGT:
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    disparity, valid_mask, occ_mask = _check_shapes(disparity, valid_mask, occ_mask)
    height, width = disparity.shape
    m, n = len(p_l), len(p_r)
    gt = MatchGT()

    warped = np.full((m, 2), np.nan)
    occluded = np.zeros(m, dtype=bool)
    for i in range(m):
        x, y = p_l.coords[i]
        d = sample_disparity_bilinear(disparity, valid_mask, x, y)
        if d is None:
            gt.excluded_l.add(i)
            continue
        occluded[i] = bool(occ_mask[_nearest_pixel(x, y, height, width)])
        warped[i] = (x - d, y)

    # Candidate edges (dist, i, j) for live left points.
    edges = []
    rx = p_r.coords[:, 0] if n else np.zeros(0)
    ry = p_r.coords[:, 1] if n else np.zeros(0)
    for i in range(m):
        if i in gt.excluded_l or occluded[i]:
            continue
        wx, wy = warped[i]
        near = np.nonzero((np.abs(ry - wy) <= eps) & (np.abs(rx - wx) <= eps))[0]
        for j in near:
            # Squared distance keeps the sort key exact for tie-breaking.
            dist2 = float((rx[j] - wx) ** 2 + (ry[j] - wy) ** 2)
            edges.append((dist2, i, int(j)))

    edges.sort()
    left_taken = set(gt.excluded_l)
    right_taken = set()
    for dist, i, j in edges:
        if i in left_taken or j in right_taken:
            continue
        gt.pairs.append((i, j))
        left_taken.add(i)
        right_taken.add(j)

    matched_l = {i for i, _ in gt.pairs}
    for i in range(m):
        if i not in matched_l and i not in gt.excluded_l:
            gt.unmatched_l.add(i)

    # A leftover right point is only certifiably unmatched if no excluded
    # left point on its row could still warp onto it (disparity >= 0 moves
    # points leftward, so reachability also needs x_r <= x_l + eps).
    exc_l = sorted(gt.excluded_l)
    for j in range(n):
        if j in right_taken:
            continue
        uncertain = any(
            abs(p_l.coords[i][1] - ry[j]) <= eps and rx[j] <= p_l.coords[i][0] + eps
            for i in exc_l)
        (gt.excluded_r if uncertain else gt.unmatched_r).add(j)

    gt.validate(m, n)
    return gt


def brute_force_match_oracle(p_l: PointSet, p_r: PointSet, disparity, valid_mask, occ_mask,
                             eps: float = DEFAULT_MATCH_EPS) -> MatchGT:
    """Exhaustive reference implementation of build_gt_matches (tests only).

    Everything is recomputed with plain Python loops over the full m×n
    candidate table, independent of the vectorized production path.
    """
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    disparity, valid_mask, occ_mask = _check_shapes(disparity, valid_mask, occ_mask)
    height, width = disparity.shape
    m, n = len(p_l), len(p_r)

    status = {}
    warp = {}
    for i in range(m):
        x = float(p_l.coords[i][0])
        y = float(p_l.coords[i][1])
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        acc_w = acc_d = 0.0
        for iy in (y0, y0 + 1):
            for ix in (x0, x0 + 1):
                w = (1.0 - abs(y - iy)) * (1.0 - abs(x - ix))
                if w > 0 and 0 <= iy < height and 0 <= ix < width and valid_mask[iy, ix]:
                    acc_w += w
                    acc_d += w * float(disparity[iy, ix])
        if acc_w <= 0:
            status[i] = "excluded"
            continue
        iy = min(max(int(np.floor(y + 0.5)), 0), height - 1)
        ix = min(max(int(np.floor(x + 0.5)), 0), width - 1)
        if occ_mask[iy, ix]:
            status[i] = "occluded"
            continue
        status[i] = "live"
        warp[i] = (x - acc_d / acc_w, y)

    table = []
    for i in range(m):
        if status[i] != "live":
            continue
        wx, wy = warp[i]
        for j in range(n):
            xr = float(p_r.coords[j][0])
            yr = float(p_r.coords[j][1])
            if abs(yr - wy) <= eps and abs(xr - wx) <= eps:
                d2 = (xr - wx) ** 2 + (yr - wy) ** 2
                table.append((float(d2), i, j))

    pairs = []
    used_l, used_r = set(), set()
    for dist, i, j in sorted(table):
        if i not in used_l and j not in used_r:
            pairs.append((i, j))
            used_l.add(i)
            used_r.add(j)

    gt = MatchGT(pairs=pairs)
    for i in range(m):
        if status[i] == "excluded":
            gt.excluded_l.add(i)
        elif i not in used_l:
            gt.unmatched_l.add(i)
    for j in range(n):
        if j in used_r:
            continue
        blocked = False
        for i in range(m):
            if status[i] != "excluded":
                continue
            same_row = abs(float(p_l.coords[i][1]) - float(p_r.coords[j][1])) <= eps
            reachable = float(p_r.coords[j][0]) <= float(p_l.coords[i][0]) + eps
            if same_row and reachable:
                blocked = True
                break
        (gt.excluded_r if blocked else gt.unmatched_r).add(j)
    gt.validate(m, n)
    return gt
