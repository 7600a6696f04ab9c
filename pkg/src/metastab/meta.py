"""Meta-training and test-time adaptation of a stabilizer.

The inner loop adapts a copy of the parameters on one task (a short clip)
with the self-supervised inner objective; the outer loop updates the shared
parameters so that the adapted copies do well against stable targets.
Parameters are handled as ``{name: tensor}`` dicts and applied through
``torch.func.functional_call`` so the original module is never mutated by
adaptation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .affine import align_tensor
from .core import AdaptationConfig, Clip
from .flow import RigidFlowProvider
from .losses import RandomFeatureExtractor, inner_total, outer_total, photometric_reconstruction
from .stabilizer import ToyStabilizer, clip_windows, clone_params, regress, stabilize_tensor
from .validation import check_video, tensor_to_video, video_to_tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class Task:
    """One adaptation unit: a ``q``-frame clip and, for meta-training, its stable targets."""

    clip: Clip
    stable_targets: np.ndarray | None = None
    task_id: str = ""

    @property
    def windows(self):
        return self.clip.windows()


@dataclass
class MetaConfig:
    alpha: float = 1e-4
    beta: float = 1e-4
    M: int = 1
    r: int = 5
    k: int = 2
    batch_tasks: int = 2
    iterations: int = 200
    first_order: bool = True
    fresh_outer_clip: bool = False
    lambda_s_in: float = 10.0
    lambda_q_in: float = 1.0
    lambda_s_out: float = 1.0
    lambda_q_out: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= 0):
            raise ValueError("need alpha > 0 and beta >= 0")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    @property
    def q(self) -> int:
        return self.r + 2 * self.k


# ------------------------------------------------------------------ tasks
def _frames_of(entry):
    return getattr(getattr(entry, "unstable", entry), "frames", getattr(entry, "unstable", entry))


def _stable_of(entry):
    stable = getattr(entry, "stable", None)
    return None if stable is None else getattr(stable, "frames", stable)


def enumerate_tasks(dataset, r: int, k: int) -> list[Task]:
    """Every non-overlapping ``q``-clip of every video, in order."""
    q = r + 2 * k
    tasks = []
    for vi, entry in enumerate(dataset):
        frames = check_video(_frames_of(entry), name="video")
        if len(frames) < q:
            raise ValueError(f"video {vi} has {len(frames)} frames, fewer than q={q}")
        stable = _stable_of(entry)
        vid = getattr(entry, "video_id", str(vi))
        for start in range(0, len(frames) - q + 1, q):
            targets = None
            if stable is not None:
                targets = np.asarray(stable[start + k : start + k + r], dtype=np.float64)
            tasks.append(Task(Clip(frames[start : start + q], start, r, k), targets, f"{vid}@{start}"))
    return tasks


def sample_tasks(dataset, r: int, k: int, count: int | None = None, seed: int = 0) -> list[Task]:
    """Non-overlapping ``q = r + 2k`` clips; ``count`` of them drawn at random when given."""
    pool = enumerate_tasks(dataset, r, k)
    if count is None or count >= len(pool):
        return pool
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(idx)]


@dataclass
class PreparedTask:
    """Tensors for one clip: windows, aligned mid frames, their masks, targets."""

    windows: torch.Tensor
    aligned: torch.Tensor
    masks: torch.Tensor
    targets: torch.Tensor | None
    start: int
    task_id: str = ""


def prepare_clip(frames: torch.Tensor, k: int, flow, est=None, targets=None, start: int = 0,
                 task_id: str = "") -> PreparedTask:
    """Align a clip to its first frame and build its ``r`` windows."""
    aligned, masks, _ = align_tensor(frames, flow, est)
    r = frames.shape[0] - 2 * k
    t = None if targets is None else video_to_tensor(targets, dtype=frames.dtype)
    return PreparedTask(clip_windows(frames, k), aligned[k : k + r], masks[k : k + r], t, start, task_id)


def prepare_task(task: Task, flow, est=None, dtype=torch.float32) -> PreparedTask:
    frames = video_to_tensor(task.clip.frames, dtype=dtype)
    return prepare_clip(frames, task.clip.k, flow, est, task.stable_targets, task.clip.start_index, task.task_id)


# ------------------------------------------------------------ objectives
def inner_objective(model, params, prep: PreparedTask, flow, fx, lambda_s=10.0, lambda_q=1.0,
                    lambda_rec=0.0, crops=None):
    """Inner loss of ``model`` with ``params`` on a prepared clip.

    With ``crops`` (list of ``(windows, aligned, masks)`` patch triples) the
    loss is averaged over patches and includes the photometric proxy weighted
    by ``lambda_rec``. Averaging keeps the step size of ``alpha`` comparable to
    the full-window objective, since the patches sample the same windows.
    """
    if crops is None:
        crops = [(prep.windows, prep.aligned, prep.masks)]
    total = 0
    terms: dict = {}
    for win, ali, msk in crops:
        v_hat = regress(model, win, params)
        b = inner_total(v_hat, ali, flow, fx, lambda_s, lambda_q, aligned_masks=msk)
        total = total + b.total
        for name, value in b.terms.items():
            terms[name] = terms.get(name, 0.0) + value
        if lambda_rec > 0:
            rec = photometric_reconstruction(v_hat, ali, msk)
            total = total + lambda_rec * rec
            terms["reconstruction"] = terms.get("reconstruction", 0.0) + rec.item()
    n = len(crops)
    return total / n, {name: value / n for name, value in terms.items()}


def _check_finite(loss: torch.Tensor, where: str, terms: dict):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite {where} loss: {terms}")


def sgd_step(params: dict, loss: torch.Tensor, alpha: float, create_graph: bool = False) -> dict:
    """One plain gradient-descent update ``theta <- theta - alpha * grad``."""
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
    out = dict(params)
    for n, g in zip(names, grads):
        if g is not None:
            out[n] = params[n] - alpha * g
    return out


def _leaf_params(model, params=None) -> dict:
    src = clone_params(model) if params is None else {n: p.detach().clone() for n, p in params.items()}
    return {n: p.requires_grad_(True) for n, p in src.items()}


def inner_adapt(model, task, cfg: AdaptationConfig, flow, fx, est=None, params=None,
                create_graph: bool = False, crops_fn=None, history: list | None = None) -> dict:
    """Run ``cfg.M`` inner gradient steps on ``task`` and return the adapted parameters.

    ``task`` is a :class:`Task` or :class:`PreparedTask`. The module's own
    parameters are never modified. With ``create_graph=True`` the result
    stays differentiable w.r.t. ``params`` (second-order meta-gradients).
    """
    if cfg.M < 1:
        raise ValueError("M must be >= 1")
    prep = task if isinstance(task, PreparedTask) else prepare_task(task, flow, est, _model_dtype(model))
    if create_graph:
        theta = dict(params) if params is not None else dict(model.named_parameters())
    else:
        theta = _leaf_params(model, params)
    for m in range(cfg.M):
        crops = crops_fn(prep, m) if crops_fn is not None else None
        loss, terms = inner_objective(model, theta, prep, flow, fx, cfg.lambda_s_in, cfg.lambda_q_in,
                                      cfg.lambda_rec if crops is not None else 0.0, crops)
        _check_finite(loss, "inner", terms)
        if history is not None:
            history.append({"task_id": prep.task_id, "step": m, "loss": loss.item(), "terms": terms})
        theta = sgd_step(theta, loss, cfg.alpha, create_graph=create_graph)
        if not create_graph:
            theta = {n: p.detach().requires_grad_(True) for n, p in theta.items()}
    return theta


def outer_objective(model, params, prep: PreparedTask, flow, fx, lambda_s=1.0, lambda_q=10.0):
    if prep.targets is None:
        raise ValueError(f"task {prep.task_id!r} has no stable targets for the outer loss")
    v_hat = regress(model, prep.windows, params)
    return outer_total(v_hat, prep.targets, flow, fx, lambda_s, lambda_q)


def meta_objective(model, params, preps, cfg: MetaConfig, flow, fx, second_order: bool = True):
    """``sum_i L_out(adapt_i(params))``, differentiable through the inner steps."""
    acfg = AdaptationConfig(M=cfg.M, alpha=cfg.alpha, lambda_s_in=cfg.lambda_s_in,
                            lambda_q_in=cfg.lambda_q_in, lambda_rec=0.0, r=cfg.r, k=cfg.k)
    total = 0
    for prep in preps:
        adapted = inner_adapt(model, prep, acfg, flow, fx, params=params, create_graph=second_order)
        total = total + outer_objective(model, adapted, prep, flow, fx, cfg.lambda_s_out, cfg.lambda_q_out).total
    return total


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def meta_train(model, dataset, cfg: MetaConfig, flow=None, fx=None, est=None, log_file=None) -> list[dict]:
    """Meta-train ``model`` in place; returns the per-task training log records.

    Each outer iteration samples ``cfg.batch_tasks`` tasks, adapts a copy of
    the parameters on each with the inner objective, scores the adapted
    copies against the stable targets and takes one Adam step (lr ``beta``)
    on the summed outer loss. First-order mode treats the adapted
    parameters as independent of the shared ones.
    """
    flow = flow or RigidFlowProvider()
    fx = fx or RandomFeatureExtractor()
    dtype = _model_dtype(model)
    tasks = enumerate_tasks(dataset, cfg.r, cfg.k)
    if not tasks:
        raise ValueError("dataset yields no tasks")
    if any(t.stable_targets is None for t in tasks):
        raise ValueError("meta-training needs stable counterparts for every video")
    preps = [prepare_task(t, flow, est, dtype) for t in tasks]
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.beta) if cfg.beta > 0 else None
    acfg = AdaptationConfig(M=cfg.M, alpha=cfg.alpha, lambda_s_in=cfg.lambda_s_in,
                            lambda_q_in=cfg.lambda_q_in, lambda_rec=0.0, r=cfg.r, k=cfg.k)
    records = []
    for it in range(cfg.iterations):
        batch = rng.choice(len(preps), size=min(cfg.batch_tasks, len(preps)), replace=False)
        if opt is not None:
            opt.zero_grad()
        grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        outer_sum = 0.0
        for bi in batch:
            prep = preps[bi]
            inner_hist: list = []
            if cfg.first_order:
                adapted = inner_adapt(model, prep, acfg, flow, fx, history=inner_hist)
            else:
                adapted = inner_adapt(model, prep, acfg, flow, fx, create_graph=True, history=inner_hist)
            outer_prep = preps[rng.integers(len(preps))] if cfg.fresh_outer_clip else prep
            ob = outer_objective(model, adapted, outer_prep, flow, fx, cfg.lambda_s_out, cfg.lambda_q_out)
            _check_finite(ob.total, "outer", ob.terms)
            if ob.total.item() > DIVERGENCE_LIMIT:
                raise FloatingPointError(f"meta-training diverged at iteration {it}: outer loss {float(ob.total):.3g}")
            if cfg.first_order:
                names = list(adapted)
                g = torch.autograd.grad(ob.total, [adapted[n] for n in names], allow_unused=True)
            else:
                names = [n for n, _ in model.named_parameters()]
                g = torch.autograd.grad(ob.total, [p for _, p in model.named_parameters()], allow_unused=True)
            for n, gi in zip(names, g):
                if gi is not None:
                    grads[n] += gi.detach()
            outer_sum += ob.total.item()
            rec = {"iter": it, "task_id": prep.task_id,
                   "inner_loss_breakdown": inner_hist[-1] if inner_hist else None,
                   "outer_loss_breakdown": ob.as_dict()}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
        if opt is not None:
            for n, p in model.named_parameters():
                p.grad = grads[n]
            opt.step()
        if it % 20 == 0:
            log.info("meta iter %d outer %.5f", it, outer_sum)
    return records


# -------------------------------------------------------------- inference
@dataclass
class AdaptResult:
    """Output of test-time adaptation for one video."""

    video: np.ndarray
    params: dict
    label: str
    steps: int
    clip_starts: list = field(default_factory=list)
    touched_frames: set = field(default_factory=set)
    losses: list = field(default_factory=list)
    peaks: list = field(default_factory=list)
    low_signal: bool = False


def vanilla_clip_starts(n_frames: int, q: int, count: int | None, seed: int) -> list[int]:
    """Clip starts for vanilla adaptation.

    ``count`` starts are drawn uniformly (with replacement) from
    ``[0, n_frames - q]``. ``count=None`` means one pass over the video:
    every non-overlapping clip once, in temporal order.
    """
    if n_frames < q:
        raise ValueError(f"video of {n_frames} frames is shorter than a {q}-frame clip")
    if count is None:
        return list(range(0, n_frames - q + 1, q))
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, n_frames - q + 1, size=count)]


def adapt_on_clips(model, frames: torch.Tensor, starts, cfg: AdaptationConfig, flow, fx, est=None,
                   crops_fn=None):
    """Sequentially adapt one parameter copy on the clips starting at ``starts``."""
    q = cfg.q
    theta = _leaf_params(model)
    touched: set = set()
    losses: list = []
    steps = 0
    for s in starts:
        touched.update(range(s, s + q))
        prep = prepare_clip(frames[s : s + q], cfg.k, flow, est, start=s, task_id=f"clip@{s}")
        theta = inner_adapt(model, prep, cfg, flow, fx, params=theta, crops_fn=crops_fn, history=losses)
        steps += cfg.M
    return theta, touched, losses, steps


def meta_inference(model, video, cfg: AdaptationConfig, flow=None, fx=None, est=None) -> AdaptResult:
    """Adapt on clips of ``video`` (per ``cfg.strategy``) and stabilize it with the result."""
    if cfg.strategy == "targeted":
        from .jerk import targeted_adapt

        return targeted_adapt(model, video, cfg, flow, fx, est)
    flow = flow or RigidFlowProvider()
    fx = fx or RandomFeatureExtractor()
    if model.k != cfg.k:
        raise ValueError(f"config k={cfg.k} does not match model k={model.k}")
    arr = check_video(video, min_frames=cfg.q)
    frames = video_to_tensor(arr, dtype=_model_dtype(model))
    starts = vanilla_clip_starts(len(arr), cfg.q, cfg.count, cfg.seed)
    theta, touched, losses, steps = adapt_on_clips(model, frames, starts, cfg, flow, fx, est)
    with torch.no_grad():
        out = stabilize_tensor(model, frames, params={n: p.detach() for n, p in theta.items()})
    return AdaptResult(tensor_to_video(out), {n: p.detach() for n, p in theta.items()}, cfg.label,
                       steps, starts, touched, losses)


def config_hash(cfg) -> str:
    d = asdict(cfg) if not isinstance(cfg, dict) else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ------------------------------------------------------- estimator facade
class MetaStabilizer(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper: ``fit`` meta-trains, ``transform`` adapts and stabilizes.

    ``fit`` takes a paired dataset (see :mod:`metastab.data`); ``transform``
    takes one ``(T, H, W, 3)`` video and returns the stabilized video,
    adapting a fresh parameter copy per call unless ``strategy`` is
    ``"none"``. Adapted parameters are cached per (video hash, config) when a
    :class:`~metastab.checkpoint.CheckpointStore` is supplied.
    """

    def __init__(self, k=2, r=5, hidden=16, recurrent=False, alpha=1e-4, beta=1e-4, M=1,
                 meta_M=1, meta_iterations=200, batch_tasks=2, first_order=True,
                 strategy="vanilla", p=10, count=100, lambda_s_in=10.0, lambda_q_in=1.0,
                 lambda_s_out=1.0, lambda_q_out=10.0, lambda_rec=1.0, seed=0, store=None):
        self.k = k
        self.r = r
        self.hidden = hidden
        self.recurrent = recurrent
        self.alpha = alpha
        self.beta = beta
        self.M = M
        self.meta_M = meta_M
        self.meta_iterations = meta_iterations
        self.batch_tasks = batch_tasks
        self.first_order = first_order
        self.strategy = strategy
        self.p = p
        self.count = count
        self.lambda_s_in = lambda_s_in
        self.lambda_q_in = lambda_q_in
        self.lambda_s_out = lambda_s_out
        self.lambda_q_out = lambda_q_out
        self.lambda_rec = lambda_rec
        self.seed = seed
        self.store = store

    def _init_model(self):
        self.model_ = ToyStabilizer(k=self.k, hidden=self.hidden, recurrent=self.recurrent, seed=self.seed)
        return self.model_

    def meta_config(self) -> MetaConfig:
        return MetaConfig(alpha=self.alpha, beta=self.beta, M=self.meta_M, r=self.r, k=self.k,
                          batch_tasks=self.batch_tasks, iterations=self.meta_iterations,
                          first_order=self.first_order, lambda_s_in=self.lambda_s_in,
                          lambda_q_in=self.lambda_q_in, lambda_s_out=self.lambda_s_out,
                          lambda_q_out=self.lambda_q_out, seed=self.seed)

    def adaptation_config(self) -> AdaptationConfig:
        return AdaptationConfig(M=self.M, alpha=self.alpha, p=self.p, count=self.count,
                                strategy=self.strategy if self.strategy != "none" else "vanilla",
                                seed=self.seed, lambda_s_in=self.lambda_s_in, lambda_q_in=self.lambda_q_in,
                                lambda_rec=self.lambda_rec, r=self.r, k=self.k)

    def fit(self, dataset, y=None, flow=None, fx=None, est=None, log_file=None):
        torch.manual_seed(self.seed)
        self._init_model()
        self.training_log_ = meta_train(self.model_, dataset, self.meta_config(), flow, fx, est, log_file)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("MetaStabilizer is not fitted; call fit() or set model_")

    def adapt(self, video, flow=None, fx=None, est=None) -> AdaptResult:
        self._check_fitted()
        arr = check_video(video)
        cfg = self.adaptation_config()
        key_meta = {"video": hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16],
                    "config": config_hash(cfg), "label": cfg.label}
        if self.store is not None:
            from .checkpoint import CheckpointStore

            cid = CheckpointStore.content_id({}, key_meta)
            cache = getattr(self, "adapt_cache_", {})
            if cid in cache and cache[cid] in self.store:
                state = self.store.get(cache[cid])
                params = {n: torch.as_tensor(v) for n, v in state.items()}
                with torch.no_grad():
                    out = stabilize_tensor(self.model_, video_to_tensor(arr, dtype=_model_dtype(self.model_)),
                                           params=params)
                return AdaptResult(tensor_to_video(out), params, cfg.label, 0)
        result = meta_inference(self.model_, arr, cfg, flow, fx, est)
        if self.store is not None:
            sid = self.store.put({n: p.numpy() for n, p in result.params.items()}, key_meta)
            self.adapt_cache_ = {**getattr(self, "adapt_cache_", {}), cid: sid}
        return result

    def transform(self, video, flow=None, fx=None, est=None) -> np.ndarray:
        self._check_fitted()
        if self.strategy == "none":
            from .stabilizer import sliding_stabilize

            return sliding_stabilize(self.model_, video)
        return self.adapt(video, flow, fx, est).video
