"""End-to-end training of the stereo backbone with the distillation heads,
checkpointing, and decoder-free evaluation.

Checkpoints are .npz archives of named little-endian float arrays. Keys are
"backbone/<param>", "intra/<param>", "cross/<param>" plus a "__meta__" JSON
string (model hyperparameters, config dict, config hash). Evaluation reads
only "backbone/" keys, so checkpoints with decoder weights stripped evaluate
identically.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import teacher as teacher_mod
from .config import RunConfig, config_hash, config_to_dict
from .correspondence import build_gt_matches
from .decoders import CrossDecoder, IntraDecoder
from .errors import ConfigError, NumericError
from .interest import PointSet
from .losses import (LossWeights, disparity_loss, focal_intra_loss,
                     hard_cross_loss, soft_cross_loss, total_loss)
from .metrics import Metrics, aggregate_metrics, sample_error_sums
from .stereonet import StereoNet, sample_descriptors
from .synthgen import StereoSample, load_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_disp", "L_intra", "L_cs", "L_ch", "total", "lr")
DETERMINISTIC_ENV = "ICG_DETERMINISTIC"


def _apply_determinism():
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        torch.use_deterministic_algorithms(True)


def save_checkpoint(path, parts: dict, meta: dict) -> None:
    """parts maps a prefix ('backbone', 'intra', 'cross') to a state_dict."""
    arrays = {}
    for prefix, state in parts.items():
        for name, tensor in state.items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    arrays["__meta__"] = np.asarray(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


def checkpoint_state(arrays: dict, prefix: str) -> dict:
    out = {}
    for key, value in arrays.items():
        if key.startswith(prefix + "/"):
            out[key[len(prefix) + 1:]] = torch.from_numpy(np.array(value))
    return out


def strip_decoder_weights(src_path, dst_path) -> None:
    """Copy a checkpoint keeping only backbone weights (the decoders are
    train-time only)."""
    arrays, meta = load_checkpoint(src_path)
    kept = {k: v for k, v in arrays.items() if k.startswith("backbone/")}
    kept["__meta__"] = np.asarray(json.dumps(meta))
    np.savez(dst_path, **kept)


@dataclass
class PreparedSample:
    sample: StereoSample
    record: teacher_mod.TeacherRecord
    labels_l: np.ndarray
    labels_r: np.ndarray
    points_l: PointSet
    points_r: PointSet
    gt_matches: object  # MatchGT or None when either side is empty


def _prepare_samples(config: RunConfig, samples: list[StereoSample],
                     need_cross: bool) -> list[PreparedSample]:
    if config.teacher == "records":
        ids = [f"{i:05d}" for i in range(len(samples))]
        records = list(teacher_mod.load_teacher_records(config.teacher_records,
                                                        expected_ids=ids))
    else:
        records = [
            teacher_mod.build_teacher_record(
                f"{i:05d}", s, detector=config.teacher,
                nms_radius=config.nms_radius, nms_threshold=config.nms_threshold,
                max_points=config.max_points, tau=config.tau,
                match_eps=config.match_eps, sinkhorn_iters=config.sinkhorn_iters)
            for i, s in enumerate(samples)]
    prepared = []
    for sample, record in zip(samples, records):
        shape = sample.left.shape
        p_l = record.point_set("left")
        p_r = record.point_set("right")
        gt = None
        if need_cross and len(p_l) and len(p_r):
            gt = build_gt_matches(p_l, p_r, sample.disparity, sample.valid_mask,
                                  sample.occ_mask, config.match_eps)
        prepared.append(PreparedSample(
            sample=sample,
            record=record,
            labels_l=teacher_mod.interest_labels_map(record.interest_l, shape),
            labels_r=teacher_mod.interest_labels_map(record.interest_r, shape),
            points_l=p_l,
            points_r=p_r,
            gt_matches=gt,
        ))
    return prepared


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    steps: int
    final_total: float


def _stack(samples: list[StereoSample]):
    left = torch.from_numpy(np.stack([s.left for s in samples]))
    right = torch.from_numpy(np.stack([s.right for s in samples]))
    disp = torch.from_numpy(np.stack([s.disparity for s in samples]))
    valid = torch.from_numpy(np.stack([s.valid_mask for s in samples]))
    return left, right, disp, valid


def train(config: RunConfig) -> TrainResult:
    config.validate()
    _apply_determinism()
    torch.manual_seed(config.seed)
    os.makedirs(config.out_dir, exist_ok=True)

    samples = load_dataset(config.train_data)
    if not samples:
        raise ConfigError(f"no samples in {config.train_data}")

    use_intra = config.enable_intra and config.lambda_intra > 0
    use_soft = config.enable_cross_soft and config.lambda_cross_soft > 0
    use_hard = config.enable_cross_hard and config.lambda_cross_hard > 0
    need_cross = use_soft or use_hard

    prepared = _prepare_samples(config, samples, need_cross)
    left_all, right_all, disp_all, valid_all = _stack(samples)
    labels_l_all = torch.from_numpy(np.stack([p.labels_l for p in prepared]))
    labels_r_all = torch.from_numpy(np.stack([p.labels_r for p in prepared]))

    net = StereoNet(config.channels, config.d_max, config.groups, config.blocks)
    params = list(net.parameters())
    intra = cross = None
    if use_intra:
        intra = IntraDecoder(config.channels, config.intra_blocks)
        params += list(intra.parameters())
    if need_cross:
        cross = CrossDecoder(config.channels, config.cross_layers,
                             config.cross_heads, config.sinkhorn_iters)
        params += list(cross.parameters())

    weights = LossWeights(config.lambda_intra if use_intra else 0.0,
                          config.lambda_cross_soft if use_soft else 0.0,
                          config.lambda_cross_hard if use_hard else 0.0)
    optimizer = torch.optim.Adam(params, lr=config.lr)
    milestones = sorted({max(1, int(config.epochs * f)) for f in (0.5, 0.75, 0.9)})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=0.5)

    image_hw = samples[0].left.shape
    n = len(samples)
    order_gen = torch.Generator().manual_seed(config.seed)
    log_path = os.path.join(config.out_dir, "train_log.csv")
    ckpt_path = os.path.join(config.out_dir, "checkpoint.npz")
    meta = {
        "model": {"channels": config.channels, "d_max": config.d_max,
                  "groups": config.groups, "blocks": config.blocks},
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
    }

    def save(path):
        parts = {"backbone": net.state_dict()}
        if intra is not None:
            parts["intra"] = intra.state_dict()
        if cross is not None:
            parts["cross"] = cross.state_dict()
        save_checkpoint(path, parts, meta)

    step = 0
    final_total = float("nan")
    with open(log_path, "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(config.epochs):
            perm = torch.randperm(n, generator=order_gen).tolist()
            for start in range(0, n, config.batch_size):
                batch_ids = perm[start:start + config.batch_size]
                step += 1
                optimizer.zero_grad()

                left = left_all[batch_ids]
                right = right_all[batch_ids]
                pred, fp = net(left, right)
                l_disp = disparity_loss(pred, disp_all[batch_ids],
                                        valid_all[batch_ids],
                                        aux_weight=config.aux_weight)

                zero = l_disp.detach() * 0.0
                l_intra = zero
                if use_intra:
                    logits_l, logits_r = intra(fp)
                    l_intra = focal_intra_loss(logits_l, logits_r,
                                               labels_l_all[batch_ids],
                                               labels_r_all[batch_ids])

                l_soft = zero
                l_hard = zero
                if need_cross:
                    soft_terms, hard_terms = [], []
                    for slot, idx in enumerate(batch_ids):
                        prep = prepared[idx]
                        if len(prep.points_l) == 0 or len(prep.points_r) == 0:
                            continue  # cross losses skipped for this sample
                        d_l = sample_descriptors(fp.f_l[slot], prep.points_l)
                        d_r = sample_descriptors(fp.f_r[slot], prep.points_r)
                        assignment = cross(prep.points_l, d_l, prep.points_r, d_r,
                                           image_hw)
                        if use_soft:
                            ref = torch.from_numpy(prep.record.assignment)
                            soft_terms.append(soft_cross_loss(
                                assignment, ref, reverse=config.kl_reverse))
                        if use_hard:
                            hard_terms.append(hard_cross_loss(assignment,
                                                              prep.gt_matches))
                    if soft_terms:
                        l_soft = torch.stack(soft_terms).mean()
                    if hard_terms:
                        l_hard = torch.stack(hard_terms).mean()

                loss = total_loss(l_disp, l_intra, l_soft, l_hard, weights)
                if not torch.isfinite(loss):
                    dump = os.path.join(config.out_dir, "diagnostic_dump.json")
                    with open(dump, "w") as f:
                        json.dump({"step": step, "batch_samples": batch_ids,
                                   "L_disp": float(l_disp), "L_intra": float(l_intra),
                                   "L_cs": float(l_soft), "L_ch": float(l_hard)}, f)
                    raise NumericError(
                        f"non-finite loss at step {step} (batch {batch_ids}); "
                        f"diagnostics in {dump}")
                loss.backward()
                optimizer.step()

                lr_now = optimizer.param_groups[0]["lr"]
                writer.writerow([step, float(l_disp), float(weights.lambda_intra * l_intra),
                                 float(weights.lambda_cross_soft * l_soft),
                                 float(weights.lambda_cross_hard * l_hard),
                                 float(loss), lr_now])
                final_total = float(loss)
            scheduler.step()
            if config.eval_every > 0 and (epoch + 1) % config.eval_every == 0:
                save(os.path.join(config.out_dir, f"checkpoint_epoch{epoch + 1:03d}.npz"))
            log.info("epoch %d/%d done (step %d, total %.4f)",
                     epoch + 1, config.epochs, step, final_total)

    save(ckpt_path)
    return TrainResult(ckpt_path, log_path, step, final_total)


def build_eval_model(meta: dict) -> StereoNet:
    spec = meta["model"]
    return StereoNet(spec["channels"], spec["d_max"], spec["groups"], spec["blocks"])


def evaluate(checkpoint_path, data_dir, batch_size: int = 4) -> Metrics:
    """Evaluate a checkpoint on a dataset. Only the backbone is constructed;
    decoder weights in the checkpoint are ignored entirely."""
    _apply_determinism()
    arrays, meta = load_checkpoint(checkpoint_path)
    net = build_eval_model(meta)
    net.load_state_dict(checkpoint_state(arrays, "backbone"))
    net.eval()

    samples = load_dataset(data_dir)
    rows = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            left, right, _, _ = _stack(chunk)
            pred, _ = net(left, right)
            disp = pred.disp.numpy()
            for k, s in enumerate(chunk):
                rows.append(sample_error_sums(disp[k], s.disparity,
                                              s.valid_mask, s.occ_mask))
    return aggregate_metrics(rows)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(row[k]) if k == "step" else float(row[k])) for k in row}
            for row in csv.DictReader(f)
        ]
