"""Training, evaluation, hyper-parameter sweeps and the gradient-check suite."""
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .encoder import (encode_plain, encode_prompted_deep, encode_prompted_shallow, head_classify,
                      init_encoder_params, init_head_params)
from .errors import FormatError, NumericError
from .numcore import AdamState, Graph, Rng, adam_step, backward, cross_entropy, finite_diff_errors
from .numcore.serialize import read_archive, write_archive
from .predictor import (init_deep_projections, init_mixer_predictor, init_transformer_predictor,
                        predict_mixer, predict_transformer, project_deep, sample_support_indices)
from .synthvid import SPEED_CATEGORIES, gen_dataset, motion_iou_category, read_dataset

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss,acc,acc_degraded,acc_clean,acc_slow,acc_medium,acc_fast,sec"
SWEEP_HEADER = "param,value,acc,acc_degraded,steps_per_sec"
SWEEP_PARAMS = {"S": "S", "K": "K", "NP": "NP"}
EVAL_CHUNK = 64


def worker_count():
    return max(1, int(os.environ.get("STPN_THREADS", "1")))


# --- model -------------------------------------------------------------------


def init_params(config, enc_cfg, num_classes):
    """All trainable tensors. Predictor tensors exist only when prompting is on.

    Each group draws from its own named substream, so the encoder and head
    initialise identically whether or not a predictor is present.
    """
    rng = Rng(config.seed)
    params = init_encoder_params(enc_cfg, rng)
    params.update(init_head_params(enc_cfg.width, num_classes, rng))
    if config.prompted:
        if config.predictor == "transformer":
            params.update(init_transformer_predictor(enc_cfg.width, config.NP, rng))
        else:
            params.update(init_mixer_predictor(enc_cfg.width, enc_cfg.n_patches, config.NP, rng))
        if config.injection == "deep":
            params.update(init_deep_projections(enc_cfg.width, enc_cfg.depth, rng))
    return params


def predict_prompts(support, params, config, enc_cfg):
    if config.predictor == "transformer":
        return predict_transformer(support, params, enc_cfg.heads, enc_cfg.ln_eps)
    return predict_mixer(support, params, enc_cfg.ln_eps)


def forward_logits(params, current, support_frames, config, enc_cfg):
    """Class logits for a batch.

    ``current`` is ``[B, 3, H, W]``; ``support_frames`` is ``[B, K, 3, H, W]``
    (ignored when prompting is off). Support frames go through the same
    encoder parameters as the current frame.
    """
    if not config.prompted:
        return head_classify(encode_plain(current, params, enc_cfg), params)
    support = encode_plain(support_frames, params, enc_cfg)  # [B, K, n, d]
    prompts = predict_prompts(support, params, config, enc_cfg)
    if config.injection == "shallow":
        feats = encode_prompted_shallow(current, prompts, params, enc_cfg)
    else:
        feats = encode_prompted_deep(current, project_deep(prompts, params, enc_cfg.depth), params, enc_cfg)
    return head_classify(feats, params)


class VideoData:
    """Clips stacked into one array for fast batch gathering."""

    def __init__(self, clips):
        if not clips:
            self.frames = np.zeros((0, 1, 3, 1, 1), dtype=np.float32)
        else:
            self.frames = np.stack([c.frames for c in clips])
        self.clips = clips
        self.labels = np.array([c.class_label for c in clips], dtype=np.int64)

    def __len__(self):
        return len(self.clips)

    @property
    def T(self):
        return self.frames.shape[1]

    @property
    def image_size(self):
        return self.frames.shape[-2:]

    def batch(self, clip_idx, t_idx, config):
        """Current frames, support frames and labels for (clip, t) pairs."""
        spec = config.support_spec()
        cur = self.frames[clip_idx, t_idx].astype(np.float64)
        sup = None
        if config.prompted:
            idx = np.array([sample_support_indices(int(t), spec, self.T) for t in t_idx])
            sup = self.frames[np.asarray(clip_idx)[:, None], idx].astype(np.float64)
        return cur, sup, self.labels[clip_idx]


def load_data(config):
    """``(train, eval)`` datasets per the config's data keys."""
    if config.data:
        if not Path(config.data).exists():
            raise FormatError(f"dataset not found: {config.data}")
        clips = read_dataset(config.data)
    else:
        h, w = config.image_size
        clips = gen_dataset(config.clips, config.frames, h, w, config.classes,
                            config.degradation_spec(), seed=config.data_seed)
    if config.eval_data:
        if not Path(config.eval_data).exists():
            raise FormatError(f"dataset not found: {config.eval_data}")
        return clips, read_dataset(config.eval_data)
    n_eval = int(round(config.eval_split * len(clips)))
    return clips[:len(clips) - n_eval], clips[len(clips) - n_eval:]


def num_classes_of(clips, config):
    return max(config.classes, 1 + max((c.class_label for c in clips), default=0))


# --- evaluation --------------------------------------------------------------


@dataclass
class MetricRecord:
    step: int
    loss: float
    acc: float
    acc_degraded: float
    acc_clean: float
    acc_slow: float
    acc_medium: float
    acc_fast: float
    sec: float = float("nan")
    counts: dict = field(default_factory=dict, compare=False)

    def csv_row(self, with_time=True):
        def fmt(x):
            return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"
        sec = fmt(self.sec) if with_time else ""
        return ",".join([str(self.step), fmt(self.loss), fmt(self.acc), fmt(self.acc_degraded),
                         fmt(self.acc_clean), fmt(self.acc_slow), fmt(self.acc_medium),
                         fmt(self.acc_fast), sec])


def _ratio(hit, n):
    return hit / n if n else float("nan")


def score_predictions(clips, predictions, step=0, loss=float("nan")):
    """Accuracy overall and per stratum; ``predictions[i]`` has one label per frame."""
    if not clips:
        raise ValueError("cannot evaluate an empty dataset")
    hit = {k: 0 for k in ("all", "degraded", "clean") + SPEED_CATEGORIES}
    n = dict.fromkeys(hit, 0)
    for clip, pred in zip(clips, predictions):
        correct = np.asarray(pred) == clip.class_label
        speed = motion_iou_category(clip.boxes)[0] if clip.T >= 2 else "slow"
        for ok, bad in zip(correct, clip.degraded):
            for key in ("all", "degraded" if bad else "clean", speed):
                hit[key] += int(ok)
                n[key] += 1
    return MetricRecord(step, loss, _ratio(hit["all"], n["all"]), _ratio(hit["degraded"], n["degraded"]),
                        _ratio(hit["clean"], n["clean"]), _ratio(hit["slow"], n["slow"]),
                        _ratio(hit["medium"], n["medium"]), _ratio(hit["fast"], n["fast"]), counts=n)


def predict_dataset(params, data, config, enc_cfg):
    """Argmax labels for every frame of every clip, chunked in a fixed order."""
    pairs = [(c, t) for c in range(len(data)) for t in range(data.T)]
    chunks = [pairs[i:i + EVAL_CHUNK] for i in range(0, len(pairs), EVAL_CHUNK)]

    def run(chunk):
        ci = np.array([p[0] for p in chunk])
        ti = np.array([p[1] for p in chunk])
        cur, sup, _ = data.batch(ci, ti, config)
        return np.argmax(forward_logits(params, cur, sup, config, enc_cfg), axis=-1)

    workers = worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(run, chunks))  # map preserves chunk order
    else:
        outs = [run(ch) for ch in chunks]
    flat = np.concatenate(outs) if outs else np.zeros(0, dtype=np.int64)
    return flat.reshape(len(data), data.T)


def evaluate(params, clips, config, step=0, loss=float("nan")):
    if not clips:
        raise ValueError("cannot evaluate an empty dataset")
    data = clips if isinstance(clips, VideoData) else VideoData(clips)
    enc_cfg = config.encoder_config(data.image_size)
    check_params(params, expected_shapes(config, enc_cfg, params))
    preds = predict_dataset(params, data, config, enc_cfg)
    return score_predictions(data.clips, preds, step, loss)


def expected_shapes(config, enc_cfg, params):
    n_classes = params["head.w"].shape[1] if "head.w" in params else config.classes
    return {k: v.shape for k, v in init_params(config, enc_cfg, n_classes).items()}


def check_params(params, shapes):
    for name, shape in shapes.items():
        if name not in params:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {tuple(params[name].shape)}, expected {tuple(shape)}")
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise FormatError(f"checkpoint has unexpected tensor {extra[0]!r}")


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    history: list
    step_times: list

    @property
    def steps_per_sec(self):
        if not self.step_times:
            return float("nan")
        return 1.0 / float(np.median(self.step_times))


def train(config, train_clips=None, eval_clips=None):
    """Jointly train encoder, predictor and head with Adam on frame labels."""
    if train_clips is None:
        train_clips, eval_clips = load_data(config)
    data = train_clips if isinstance(train_clips, VideoData) else VideoData(train_clips)
    if eval_clips is not None and not isinstance(eval_clips, VideoData):
        eval_clips = VideoData(eval_clips) if eval_clips else None
    if len(data) == 0 and config.steps:
        raise ValueError("no training clips")
    enc_cfg = config.encoder_config(data.image_size if len(data) else None)
    n_classes = num_classes_of(data.clips, config)
    params = init_params(config, enc_cfg, n_classes)
    batch_rng = Rng(config.seed).spawn("batches")
    state = AdamState()
    history, times, window = [], [], []
    start = time.perf_counter()
    with threadpool_limits(worker_count()):
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            ci = batch_rng.integers(len(data), size=config.batch)
            ti = batch_rng.integers(data.T, size=config.batch)
            cur, sup, labels = data.batch(ci, ti, config)
            graph = Graph()
            bound = graph.bind(params)
            loss = cross_entropy(forward_logits(bound, cur, sup, config, enc_cfg), labels)
            loss_val = float(loss.value)
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss {loss_val} at step {step}")
            grads = backward(graph, loss)
            params, state = adam_step(params, grads, state, config.lr, config.beta1,
                                      config.beta2, config.adam_eps)
            times.append(time.perf_counter() - t0)
            window.append(loss_val)
            if step % config.eval_every == 0 or step == config.steps:
                mean_loss = float(np.mean(window))
                window = []
                if eval_clips is not None:
                    rec = evaluate(params, eval_clips, config, step, mean_loss)
                else:
                    nan = float("nan")
                    rec = MetricRecord(step, mean_loss, nan, nan, nan, nan, nan, nan)
                rec.sec = time.perf_counter() - start
                history.append(rec)
                log.info("step %d loss %.4f acc %.3f degraded %.3f (%.1fs)", step, mean_loss,
                         rec.acc, rec.acc_degraded, rec.sec)
    return TrainResult(params, history, times)


def write_metrics(path, history, with_time=False):
    with open(path, "w", newline="") as f:
        f.write(METRICS_HEADER + "\n")
        for rec in history:
            f.write(rec.csv_row(with_time) + "\n")


def run_training(config, out_dir=None):
    """Train and write ``config.snapshot``, ``metrics.csv`` and ``final.ckpt``."""
    out = Path(out_dir or config.out or "run")
    result = train(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config.to_text(), encoding="utf-8")
    write_metrics(out / "metrics.csv", result.history, config.log_wallclock)
    write_archive(out / "final.ckpt", result.params)
    return result


def load_checkpoint(path):
    return read_archive(path)


# --- sweeps ------------------------------------------------------------------


@dataclass
class SweepRow:
    param: str
    value: int
    acc: float
    acc_degraded: float
    steps_per_sec: float

    def csv_row(self):
        return f"{self.param},{self.value},{self.acc:.6f},{self.acc_degraded:.6f},{self.steps_per_sec:.4f}"


def ablation_sweep(base, param, values, train_clips=None, eval_clips=None):
    """Train and evaluate once per value of S, K or NP on shared data."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep param must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep grid is empty")
    if train_clips is None:
        train_clips, eval_clips = load_data(base)
    train_data = VideoData(train_clips) if not isinstance(train_clips, VideoData) else train_clips
    eval_data = VideoData(eval_clips) if not isinstance(eval_clips, VideoData) else eval_clips
    rows = []
    for v in values:
        cfg = base.replace(**{SWEEP_PARAMS[param]: int(v)})
        result = train(cfg, train_data, None)
        rec = evaluate(result.params, eval_data, cfg, cfg.steps)
        rows.append(SweepRow(param, int(v), rec.acc, rec.acc_degraded, result.steps_per_sec))
        log.info("sweep %s=%s acc %.3f steps/s %.2f", param, v, rec.acc, result.steps_per_sec)
    return rows


def write_sweep(path, rows):
    with open(path, "w", newline="") as f:
        f.write(SWEEP_HEADER + "\n")
        for r in rows:
            f.write(r.csv_row() + "\n")


# --- gradient checks ---------------------------------------------------------

GRADCHECK_TOL = 1e-4


@dataclass
class GradcheckEntry:
    group: str
    max_rel_error: float
    coords: int

    @property
    def ok(self):
        return self.max_rel_error < GRADCHECK_TOL


def tiny_gradcheck_config(seed=0):
    return RunConfig(patch=4, depth=2, width=8, heads=2, ffn_hidden=16, S=1, K=2, NP=2,
                     size="8x8", classes=3, seed=seed)


def gradcheck_suite(config=None, seed=0, eps=1e-5):
    """Finite-difference checks over each parameter group on a tiny model."""
    config = config or tiny_gradcheck_config(seed)
    enc_cfg = config.encoder_config()
    if enc_cfg.n_patches > 8 or enc_cfg.width > 16 or enc_cfg.depth > 2:
        raise ValueError("gradcheck_suite requires n <= 8, d <= 16, L <= 2")
    rng = Rng(seed).spawn("gradcheck")
    B, H, W = 2, *enc_cfg.image_size
    cur = rng.uniform(size=(B, 3, H, W))
    sup = rng.uniform(size=(B, config.K, 3, H, W))
    labels = rng.integers(config.classes, size=B)
    entries = []

    def add(group, f, params, wrt):
        errs = finite_diff_errors(f, params, eps, wrt)
        coords = sum(int(np.prod(params[k].shape)) for k in wrt)
        entries.append(GradcheckEntry(group, max(errs.values(), default=0.0), coords))

    base = init_params(config.replace(injection="none"), enc_cfg, config.classes)
    feats = rng.normal(size=(B, enc_cfg.n_patches, enc_cfg.width))
    head = {k: v for k, v in base.items() if k.startswith("head.")}
    add("head", lambda p: cross_entropy(head_classify(feats, p), labels), head, list(head))

    def plain_loss(p):
        return cross_entropy(head_classify(encode_plain(cur, p, enc_cfg), p), labels)

    add("encoder", plain_loss, base, [k for k in base if k.startswith("encoder.")])

    prompt_params = dict(base, prompts=rng.normal(size=(config.NP, enc_cfg.width)))

    def prompt_loss(p):
        feats = encode_prompted_shallow(cur, p["prompts"], p, enc_cfg)
        return cross_entropy(head_classify(feats, p), labels)

    add("prompts", prompt_loss, prompt_params, ["prompts"])

    for kind in ("transformer", "mixer"):
        cfg = config.replace(predictor=kind, injection="shallow")
        params = init_params(cfg, enc_cfg, config.classes)
        pre = "predictor." if kind == "transformer" else "mixer."

        def full_loss(p, cfg=cfg):
            return cross_entropy(forward_logits(p, cur, sup, cfg, enc_cfg), labels)

        add(f"{kind}_predictor", full_loss, params, [k for k in params if k.startswith(pre)])
        add(f"{kind}_encoder", full_loss, params, [k for k in params if k.startswith("encoder.")])

    cfg = config.replace(predictor="transformer", injection="deep")
    params = init_params(cfg, enc_cfg, config.classes)
    add("deep_projections", lambda p: cross_entropy(forward_logits(p, cur, sup, cfg, enc_cfg), labels),
        params, [k for k in params if k.startswith("deep.")])
    return entries
