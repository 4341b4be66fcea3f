"""Training loop: data pipeline, teacher clustering, three-term loss, EMA, checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, to_text, from_text
from .depth import DenseDepthMap, complete_depth, pool_token_depth
from .encoder import ModelPair, Network, Schedules, ema_update
from .io import load_checkpoint, save_checkpoint
from .objective import (
    ObjectQueue,
    Temps,
    global_cv_loss,
    object_ci_loss,
    object_cv_loss,
    queue_update,
    total_loss,
)
from .scenes import generate_scene, sample_sparse_depth, sample_views
from .semantic import PrototypeBank, initial_center, teacher_assignment, update_center
from .spatial import (
    ClusterAssignment,
    ObjectReps,
    TokenField,
    cluster_joint_views,
    merge_assignments,
    pool_features,
)

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "global_cv", "object_cv", "object_ci", "total", "n_global", "n_object_cv", "n_object_ci"]


class StepError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PairSample:
    """Everything the loss needs from one source scene, before any network runs."""

    scene_seed: int
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    positions_a: np.ndarray
    positions_b: np.ndarray
    depths_a: np.ndarray
    depths_b: np.ndarray
    classes_a: np.ndarray  # ground-truth token classes, for diagnostics only
    classes_b: np.ndarray


def prepare_pair(cfg: RunConfig, scene_seed: int) -> PairSample:
    t = cfg.train
    enc = cfg.encoder
    scene = generate_scene(cfg.scene, scene_seed)
    va, vb = sample_views(
        scene, t.min_scale, t.max_scale, derive_seed(scene_seed, 1), enc.view_size, enc.patch_size, t.flip_prob
    )
    sparse = sample_sparse_depth(scene, t.sparse_fill, t.sparse_pattern, derive_seed(scene_seed, 2))
    dense = complete_depth(sparse, t.completion_radius, t.max_depth)
    from .evaluate import token_majority

    return PairSample(
        scene_seed=scene_seed,
        pixels_a=va.pixels,
        pixels_b=vb.pixels,
        positions_a=va.token_positions(),
        positions_b=vb.token_positions(),
        depths_a=pool_token_depth(DenseDepthMap(va.crop(dense.values), "completed"), va).values,
        depths_b=pool_token_depth(DenseDepthMap(vb.crop(dense.values), "completed"), vb).values,
        classes_a=token_majority(va.crop(scene.class_mask), va.token_grid),
        classes_b=token_majority(vb.crop(scene.class_mask), vb.token_grid),
    )


def prepare_batch(cfg: RunConfig, step: int) -> list[PairSample]:
    t = cfg.train
    return [prepare_pair(cfg, derive_seed(t.data_seed, step * t.batch_size + i)) for i in range(t.batch_size)]


@dataclass
class TrainState:
    cfg: RunConfig
    pair: ModelPair
    optimizer: torch.optim.Optimizer
    center: torch.Tensor
    queue: ObjectQueue
    step: int = 0
    rows: list = field(default_factory=list)

    def bank(self, which: str = "teacher") -> PrototypeBank:
        net = self.pair.teacher if which == "teacher" else self.pair.student
        return PrototypeBank(net.prototypes, self.cfg.train.bank_mode, self.center, self.cfg.train.center_momentum)


def make_schedules(cfg: RunConfig) -> Schedules:
    t = cfg.train
    return Schedules(
        total_steps=t.total_steps,
        momentum_start=t.momentum_start,
        temp_warmup_steps=t.temp_warmup_steps,
        lr=t.lr,
        min_lr=t.min_lr,
    )


def _param_groups(net: Network):
    decay, no_decay = [], []
    for name, p in net.named_parameters():
        (decay if p.ndim >= 2 and name != "prototypes" else no_decay).append(p)
    return [{"params": decay, "weight_decay": 0.0, "decays": True}, {"params": no_decay, "weight_decay": 0.0, "decays": False}]


def init_state(cfg: RunConfig) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    student = Network(cfg.encoder, seed=cfg.train.seed)
    pair = ModelPair(student, make_schedules(cfg))
    optimizer = torch.optim.AdamW(_param_groups(student), lr=cfg.train.lr)
    center = initial_center(cfg.encoder.num_prototypes, cfg.train.bank_mode)
    queue = ObjectQueue(cfg.train.queue_capacity, cfg.train.queue_warm_fraction)
    return TrainState(cfg, pair, optimizer, center, queue)


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StepError):
                raise StepError(f"{name}: {exc}") from exc
            return False

    return _Ctx()


def cluster_pair(cfg: RunConfig, sample: PairSample, feats_a: np.ndarray, feats_b: np.ndarray, seed: int) -> ClusterAssignment:
    params = replace(cfg.clustering, seed=seed)
    ta = TokenField(feats_a, sample.positions_a, sample.depths_a, "A")
    tb = TokenField(feats_b, sample.positions_b, sample.depths_b, "B")
    return cluster_joint_views(ta, tb, params)


def train_step(state: TrainState, batch: list[PairSample] | None = None) -> dict:
    cfg, step = state.cfg, state.step
    sched = state.pair.schedules
    temps = Temps(sched.teacher_temp(step), 0.1)
    B = cfg.train.batch_size
    with _stage("synth_scenes/depth_pipeline"):
        batch = batch if batch is not None else prepare_batch(cfg, step)
    pixels = np.concatenate([np.stack([s.pixels_a for s in batch]), np.stack([s.pixels_b for s in batch])])
    teacher, student = state.pair.teacher, state.pair.student
    t_bank, s_bank = state.bank("teacher"), state.bank("student")
    t_bank.cache, s_bank.cache = {}, {}

    with _stage("encoder_toy"):
        with torch.no_grad():
            tg, td = teacher.encode(pixels)
            tz = teacher.project(tg)
        sg, sd = student.encode(pixels)
        sz = student.project(sg)

    with _stage("objective_engine/global"):
        g_loss = global_cv_loss(tz[:B], tz[B:], sz[:B], sz[B:], t_bank, temps, student_bank=s_bank)

    with _stage("spatial_clustering"):
        assigns = [
            cluster_pair(cfg, sample, td[i].numpy(), td[B + i].numpy(), derive_seed(cfg.train.seed, step, i))
            for i, sample in enumerate(batch)
        ]
        merged = merge_assignments(assigns)

    with _stage("objective_engine/objects"):
        m = merged.num_clusters
        P = td.shape[1]
        objects = {}
        for v, rows in (("A", slice(0, B)), ("B", slice(B, 2 * B))):
            labels = merged.view_labels(v)
            t_obj = pool_features(td[rows].reshape(B * P, -1), labels, m)
            s_obj = pool_features(sd[rows].reshape(B * P, -1), labels, m)
            with torch.no_grad():
                t_proj = ObjectReps(teacher.project(t_obj.reps), t_obj.cluster_ids)
            s_proj = ObjectReps(student.project(s_obj.reps), s_obj.cluster_ids)
            objects[v] = (t_obj, t_proj, s_proj)
        cv_loss, cv_n = object_cv_loss(
            objects["A"][1], objects["B"][1], objects["A"][2], objects["B"][2], merged, t_bank, temps, s_bank
        )
        ci_sum, ci_n = 0.0, 0
        pushed_raw = [teacher_assignment(tz, t_bank, temps.teacher)[1]]
        new_objects = []
        for v in ("A", "B"):
            t_obj, t_proj, s_proj = objects[v]
            loss, n = object_ci_loss(state.queue, t_obj, s_proj, s_bank, temps)
            ci_sum, ci_n = ci_sum + loss * n, ci_n + n
            probs, raw = teacher_assignment(t_proj.reps, t_bank, temps.teacher)
            new_objects.append((t_obj, probs))
            pushed_raw.append(raw)

    zero = torch.zeros((), dtype=torch.float64)
    breakdown = total_loss(
        g_loss,
        cv_loss,
        ci_sum / ci_n if ci_n else zero,
        {"global_cv": B, "object_cv": cv_n, "object_ci": ci_n},
    )

    with _stage("optimizer"):
        wd = sched.weight_decay(step)
        for group in state.optimizer.param_groups:
            group["lr"] = sched.learning_rate(step)
            group["weight_decay"] = wd if group["decays"] else 0.0
        state.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        state.optimizer.step()
        # uniform mode keeps unit-norm prototypes after every step
        if cfg.train.normalize_prototypes or cfg.train.bank_mode == "uniform":
            with torch.no_grad():
                student.prototypes.copy_(torch.nn.functional.normalize(student.prototypes, dim=-1))

    with _stage("ema/center/queue"):
        ema_update(state.pair, step)
        state.center = update_center(t_bank, torch.cat(pushed_raw)).center
        for t_obj, probs in new_objects:
            queue_update(state.queue, t_obj, probs)

    row = breakdown.as_row(step)
    state.rows.append(row)
    state.step += 1
    return row


# --- checkpoints -----------------------------------------------------------------


def state_arrays(state: TrainState) -> tuple[dict, dict]:
    arrays = {}
    for prefix, net in (("student", state.pair.student), ("teacher", state.pair.teacher)):
        for name, p in net.state_dict().items():
            arrays[f"{prefix}.{name}"] = p.detach().numpy()
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, value in st.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(value).numpy()
    arrays["bank.center"] = state.center.numpy()
    arrays["queue.embeddings"] = state.queue.embeddings()
    arrays["queue.assignments"] = state.queue.assignments()
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    meta = {
        "step": state.step,
        "config": to_text(state.cfg),
        "param_groups": opt["param_groups"],
        "rows": state.rows,
    }
    return arrays, meta


def save_state(state: TrainState, path) -> Path:
    arrays, meta = state_arrays(state)
    return save_checkpoint(path, arrays, meta)


def load_state(path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    cfg = from_text(meta["config"])
    state = init_state(cfg)
    for prefix, net in (("student", state.pair.student), ("teacher", state.pair.teacher)):
        sd = {name: torch.from_numpy(arrays[f"{prefix}.{name}"]) for name in net.state_dict()}
        net.load_state_dict(sd)
    opt_state = {}
    for key, arr in arrays.items():
        if key.startswith("optim."):
            _, idx, name = key.split(".", 2)
            opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(arr)
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    state.center = torch.from_numpy(arrays["bank.center"])
    emb, asg = arrays["queue.embeddings"], arrays["queue.assignments"]
    for e, p in zip(emb, asg):
        state.queue.push(e, p)
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch"]))
    state.step = int(meta["step"])
    state.rows = list(meta["rows"])
    return state


def write_log(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def train(cfg: RunConfig, state: TrainState | None = None, stop_at: int | None = None, out_dir=None) -> TrainState:
    """Run (or resume) training up to ``stop_at`` (default: total_steps).

    Writes ``log.csv`` and ``checkpoint.bin`` into ``out_dir`` when given, plus
    periodic ``checkpoint_<step>.bin`` files if ``checkpoint_every`` is set.
    """
    state = state or init_state(cfg)
    stop_at = cfg.train.total_steps if stop_at is None else min(stop_at, cfg.train.total_steps)
    every = cfg.train.checkpoint_every
    while state.step < stop_at:
        row = train_step(state)
        if row["step"] % 50 == 0:
            log.info("step %d total %.4f", row["step"], row["total"])
        if out_dir is not None and every and state.step % every == 0:
            save_state(state, Path(out_dir) / f"checkpoint_{state.step}.bin")
    if out_dir is not None:
        write_log(state.rows, Path(out_dir) / "log.csv")
        save_state(state, Path(out_dir) / "checkpoint.bin")
    return state
