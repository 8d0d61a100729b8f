"""Local prompt-training strategies.

Each trainer consumes a broadcast payload, runs SGD with momentum and a
cosine learning-rate schedule on its trainable fields, and emits a
payload of the exact shape it declared. Client-retained state (momentum
buffers, personal prompts) never travels.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .numerics import softmax_ce_batch, softmax_temp
from .transport import sinkhorn_batched
from .vlm import (
    ModelAssets,
    ModelConfig,
    PromptContext,
    TextSetGraph,
    build_prompt_context,
    text_features_all,
    unit_rows,
)

TRAINER_KINDS = ("promptfl", "fedotp", "cocoop", "plot", "proda", "prograd", "src", "kgcoop")


# ---------------------------------------------------------------------------
# Communicable payloads
# ---------------------------------------------------------------------------

@dataclass
class CommunicablePayload:
    """Named float64 arrays that travel between server and clients."""

    fields: dict[str, np.ndarray]

    @property
    def scalar_count(self) -> int:
        return int(sum(a.size for a in self.fields.values()))

    def copy(self) -> "CommunicablePayload":
        return CommunicablePayload({k: v.copy() for k, v in self.fields.items()})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.fields)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CommunicablePayload":
        with np.load(io.BytesIO(blob)) as loaded:
            return cls({k: loaded[k] for k in loaded.files})

    def equals(self, other: "CommunicablePayload") -> bool:
        if self.fields.keys() != other.fields.keys():
            return False
        return all(np.array_equal(self.fields[k], other.fields[k]) for k in self.fields)

    def max_abs_diff(self, other: "CommunicablePayload") -> float:
        if self.fields.keys() != other.fields.keys():
            raise ConfigError("payload field sets differ")
        return max(
            (float(np.max(np.abs(self.fields[k] - other.fields[k]))) if self.fields[k].size else 0.0)
            for k in self.fields
        )


# ---------------------------------------------------------------------------
# SGD with momentum and cosine decay
# ---------------------------------------------------------------------------

@dataclass
class SGDState:
    velocities: dict[str, np.ndarray]
    lr0: float = 0.002
    momentum: float = 0.9


def cosine_lr(lr0: float, t: int, total: int) -> float:
    if not (0 <= t <= total):
        raise ConfigError(f"round {t} outside schedule of {total} rounds")
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * t / total))


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: SGDState, t: int, total: int) -> dict[str, np.ndarray]:
    """v <- momentum*v + g; p <- p - lr_t*v, with lr_t on the cosine schedule."""
    lr = cosine_lr(state.lr0, t, total)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        if v.shape != p.shape:
            raise ConfigError(f"velocity shape {v.shape} != parameter shape {p.shape} for {name!r}")
        v = state.momentum * v + g
        state.velocities[name] = v
        out[name] = p - lr * v
    return out


# ---------------------------------------------------------------------------
# Conditioned-prompt net (two affine layers, tanh between)
# ---------------------------------------------------------------------------

def metanet_init(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "meta_w1": rng.normal(size=(cfg.meta_hidden, cfg.d_image)) / np.sqrt(cfg.d_image),
        "meta_b1": np.zeros(cfg.meta_hidden),
        "meta_w2": rng.normal(size=(cfg.d_token, cfg.meta_hidden))
        * (0.1 * cfg.token_scale) / np.sqrt(cfg.meta_hidden),
        "meta_b2": np.zeros(cfg.d_token),
    }


def metanet_param_count(cfg: ModelConfig) -> int:
    h, di, dt = cfg.meta_hidden, cfg.d_image, cfg.d_token
    return h * di + h + dt * h + dt


def metanet_forward(meta: dict[str, np.ndarray], image_feature: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Per-token bias conditioned on one image feature. Returns (bias, cache)."""
    a1 = meta["meta_w1"] @ image_feature + meta["meta_b1"]
    z1 = np.tanh(a1)
    bias = meta["meta_w2"] @ z1 + meta["meta_b2"]
    return bias, (image_feature, z1)


def metanet_backward(meta: dict[str, np.ndarray], cache: tuple,
                     dbias: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients for one image into `grads`."""
    x, z1 = cache
    grads["meta_w2"] += np.outer(dbias, z1)
    grads["meta_b2"] += dbias
    dz1 = meta["meta_w2"].T @ dbias
    da1 = dz1 * (1.0 - z1 * z1)
    grads["meta_w1"] += np.outer(da1, x)
    grads["meta_b1"] += da1


# ---------------------------------------------------------------------------
# Batch plumbing
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    master_indices: np.ndarray
    local_maps: np.ndarray | None = None


def iterate_batches(dataset, rng: np.random.Generator, batch_size: int):
    """Shuffled minibatches over one client's data."""
    n = len(dataset)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield Batch(
            features=dataset.features[sel],
            labels=dataset.labels[sel],
            master_indices=dataset.master_indices[sel],
            local_maps=None if dataset.local_maps is None else dataset.local_maps[sel],
        )


@dataclass
class TrainContext:
    """Everything a trainer needs for one local pass."""

    assets: ModelAssets
    round_index: int
    total_rounds: int
    rng: np.random.Generator
    batch_size: int = 16
    epochs: int = 1
    lr0: float = 0.002
    momentum: float = 0.9
    class_ids: np.ndarray | None = None  # restrict training to these classes
    audit: list | None = None            # collects each batch's master indices

    def map_labels(self, labels: np.ndarray) -> np.ndarray:
        if self.class_ids is None:
            return labels
        pos = np.searchsorted(self.class_ids, labels)
        bad = (pos >= len(self.class_ids)) | (self.class_ids[np.minimum(pos, len(self.class_ids) - 1)] != labels)
        if np.any(bad):
            raise DataError("batch contains labels outside the trained class set")
        return pos


@dataclass
class TrainStats:
    mean_loss: float
    n_batches: int
    n_samples: int


@dataclass
class ClientTrainState:
    sgd: SGDState
    local_fields: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Loss kernels shared by the trainers
# ---------------------------------------------------------------------------

def _forward_sims(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
                  class_ids: np.ndarray | None):
    feats, graphs = text_features_all(assets.encoder, context, assets.vocab, class_ids=class_ids)
    sims = np.einsum("bd,pcd->pbc", xh, feats)
    return feats, graphs, sims


def _context_grads(graphs, dT_per_set) -> np.ndarray:
    return np.stack([graphs[p].backward(dT_per_set[p])[0] for p in range(len(graphs))])


def _reference_probs(assets: ModelAssets, xh: np.ndarray,
                     class_ids: np.ndarray | None) -> np.ndarray:
    """Zero-shot predictions via the same scoring expression as the live path,
    so they cancel bitwise when the trained context equals the reference."""
    hand = assets.hand_features_for(class_ids)
    sims = np.einsum("bd,pcd->pbc", xh, hand[None]).mean(axis=0)
    return softmax_temp(sims, assets.cfg.tau)


def ce_loss_and_grads(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
                      labels: np.ndarray, class_ids: np.ndarray | None = None):
    """Plain mean cross-entropy; scores are per-set cosine means."""
    feats, graphs, sims = _forward_sims(assets, context, xh, class_ids)
    loss, dlogits, probs = softmax_ce_batch(sims.mean(axis=0), labels, assets.cfg.tau)
    dT = np.einsum("bc,bd->cd", dlogits / context.m, xh)
    grads = _context_grads(graphs, [dT] * context.m)
    return loss, grads, (feats, graphs, sims, probs)


def loss_kgcoop(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
                labels: np.ndarray, lambda_kg: float,
                class_ids: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """CE plus squared distance of class features to their fixed references."""
    if lambda_kg < 0:
        raise ConfigError("lambda_kg must be >= 0")
    feats, graphs, sims = _forward_sims(assets, context, xh, class_ids)
    loss, dlogits, _ = softmax_ce_batch(sims.mean(axis=0), labels, assets.cfg.tau)
    hand = assets.hand_features_for(class_ids)
    n_classes = hand.shape[0]
    dT_ce = np.einsum("bc,bd->cd", dlogits / context.m, xh)
    dTs, reg = [], 0.0
    for p in range(context.m):
        diff = feats[p] - hand
        reg += float((diff * diff).sum() / n_classes)
        dTs.append(dT_ce + lambda_kg * 2.0 * diff / (n_classes * context.m))
    reg /= context.m
    return loss + lambda_kg * reg, _context_grads(graphs, dTs)


def project_prograd(g_task: np.ndarray, g_general: np.ndarray, lambda_pg: float = 1.0) -> np.ndarray:
    """Drop the component of g_task that conflicts with the reference direction."""
    g_task = np.asarray(g_task, dtype=np.float64)
    g_general = np.asarray(g_general, dtype=np.float64)
    if g_task.shape != g_general.shape:
        raise DomainError("gradient shapes differ")
    denom = float(g_general.ravel() @ g_general.ravel())
    if denom == 0.0:
        return g_task
    dot = float(g_task.ravel() @ g_general.ravel())
    if dot >= 0.0:
        return g_task
    return g_task - lambda_pg * (dot / denom) * g_general


def loss_prograd(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
                 labels: np.ndarray, lambda_pg: float,
                 class_ids: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """CE gradient projected to not conflict with the zero-shot alignment gradient."""
    feats, graphs, sims = _forward_sims(assets, context, xh, class_ids)
    tau = assets.cfg.tau
    mean_sims = sims.mean(axis=0)
    loss, dlogits, probs = softmax_ce_batch(mean_sims, labels, tau)
    dT_task = np.einsum("bc,bd->cd", dlogits / context.m, xh)
    g_task = _context_grads(graphs, [dT_task] * context.m)

    # gradient of mean KL(current || zero-shot) w.r.t. the same scores
    q = _reference_probs(assets, xh, class_ids)
    log_ratio = np.log(probs) - np.log(q)
    kl = (probs * log_ratio).sum(axis=1, keepdims=True)
    dkl = probs * (log_ratio - kl) / (tau * xh.shape[0])
    dT_gen = np.einsum("bc,bd->cd", dkl / context.m, xh)
    g_general = _context_grads(graphs, [dT_gen] * context.m)

    projected = project_prograd(g_task.ravel(), g_general.ravel(), lambda_pg)
    return loss, projected.reshape(g_task.shape)


def loss_proda(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
               labels: np.ndarray, lambda_orth: float,
               class_ids: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Prompt-ensemble CE plus a hinge penalty on aligned prompt-set features."""
    if context.m < 2:
        raise ConfigError(f"prompt-distribution loss needs >= 2 prompt sets, got {context.m}")
    feats, graphs, sims = _forward_sims(assets, context, xh, class_ids)
    loss, dlogits, _ = softmax_ce_batch(sims.mean(axis=0), labels, assets.cfg.tau)
    dT_ce = np.einsum("bc,bd->cd", dlogits / context.m, xh)
    dTs = [dT_ce.copy() for _ in range(context.m)]
    n_classes = feats.shape[1]
    penalty = 0.0
    for i in range(context.m):
        for j in range(i + 1, context.m):
            dots = (feats[i] * feats[j]).sum(axis=1)  # unit features: dot == cos
            pos = np.maximum(dots, 0.0)
            penalty += float((pos * pos).mean())
            coef = lambda_orth * 2.0 * pos[:, None] / n_classes
            dTs[i] += coef * feats[j]
            dTs[j] += coef * feats[i]
    return loss + lambda_orth * penalty, _context_grads(graphs, dTs)


def loss_src(assets: ModelAssets, context: PromptContext, xh: np.ndarray,
             labels: np.ndarray, mu_text: float, mu_logit: float,
             class_ids: np.ndarray | None = None,
             reference_features: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """CE plus L1 feature consistency and KL(zero-shot || current) self-regularisation."""
    if mu_text < 0 or mu_logit < 0:
        raise ConfigError("self-regularisation weights must be >= 0")
    feats, graphs, sims = _forward_sims(assets, context, xh, class_ids)
    tau = assets.cfg.tau
    loss, dlogits, probs = softmax_ce_batch(sims.mean(axis=0), labels, tau)
    if reference_features is None:
        reference_features = assets.reference_features()
        if class_ids is not None:
            reference_features = reference_features[np.asarray(class_ids)]
    n_classes = reference_features.shape[0]
    batch = xh.shape[0]

    q = _reference_probs(assets, xh, class_ids)
    log_ratio = np.log(q) - np.log(probs)
    kl = float((q * log_ratio).sum(axis=1).mean())
    dkl_dlogits = (probs - q) / (tau * batch)

    dT_ce = np.einsum("bc,bd->cd", (dlogits + mu_logit * dkl_dlogits) / context.m, xh)
    dTs, l1 = [], 0.0
    for p in range(context.m):
        diff = feats[p] - reference_features
        l1 += float(np.abs(diff).sum() / n_classes)
        dTs.append(dT_ce + mu_text * np.sign(diff) / (n_classes * context.m))
    l1 /= context.m
    return loss + mu_text * l1 + mu_logit * kl, _context_grads(graphs, dTs)


def trajectory_average(contexts: list[np.ndarray], window: int) -> np.ndarray:
    """Gaussian-weighted mean of the last `window` contexts, centered on the window."""
    if window < 1:
        raise ConfigError(f"trajectory window must be >= 1, got {window}")
    tail = contexts[-window:]
    k = len(tail)
    center = (k - 1) / 2.0
    sigma = max(window / 2.0, 0.5)
    w = np.exp(-((np.arange(k) - center) ** 2) / (2.0 * sigma * sigma))
    w /= w.sum()
    return sum(wi * c for wi, c in zip(w, tail))


def ot_scores_and_grads(assets: ModelAssets, context: PromptContext, batch: Batch,
                        labels: np.ndarray, eps: float, iters: int,
                        col_relax: float = 1.0,
                        class_ids: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """CE over transport-aligned logits; plans are constants of the backward pass.

    For each (sample, class) the plan matches the sample's region
    features to the class's per-set prompt features; the logit is the
    negative transport cost.
    """
    if batch.local_maps is None:
        raise ConfigError("transport-based training needs per-sample local feature maps")
    feats, graphs, _ = _forward_sims(assets, context, unit_rows(batch.features), class_ids)
    locals_ = batch.local_maps                     # (B, M, d)
    prompts = feats.transpose(1, 0, 2)             # (C, m, d)
    costs = 1.0 - np.einsum("bmd,cnd->bcmn", locals_, prompts)
    plans = sinkhorn_batched(costs, eps, iters, col_relax=col_relax)
    logits = -(plans * costs).sum(axis=(-2, -1))   # (B, C)
    loss, dlogits, _ = softmax_ce_batch(logits, labels, assets.cfg.tau)
    # d logit / d prompt_feat = plan^T @ locals (cost = 1 - <l, f>)
    dT_sets = np.einsum("bc,bcmn,bmd->ncd", dlogits, plans, locals_)
    return loss, _context_grads(graphs, list(dT_sets))


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------

class LocalTrainer:
    """Shared SGD loop; subclasses supply gradients and payload layout."""

    kind: str = ""
    set_multiplier: int = 1  # prompt sets per configured "number of prompts"

    def n_sets(self, cfg: ModelConfig) -> int:
        return cfg.m * self.set_multiplier

    # -- payload layout ----------------------------------------------------
    def payload_shapes(self, cfg: ModelConfig) -> dict[str, tuple]:
        return {"context": (self.n_sets(cfg), cfg.L, cfg.d_token)}

    def payload_scalars(self, cfg: ModelConfig) -> int:
        return int(sum(np.prod(s) for s in self.payload_shapes(cfg).values()))

    def init_payload(self, cfg: ModelConfig, rng: np.random.Generator) -> CommunicablePayload:
        return CommunicablePayload(
            {"context": build_prompt_context(cfg, rng, m=self.n_sets(cfg)).vectors}
        )

    def init_state(self, cfg: ModelConfig, rng: np.random.Generator,
                   lr0: float = 0.002, momentum: float = 0.9) -> ClientTrainState:
        return ClientTrainState(sgd=SGDState(velocities={}, lr0=lr0, momentum=momentum))

    # -- training ----------------------------------------------------------
    def local_train(self, payload: CommunicablePayload, state: ClientTrainState,
                    dataset, ctx: TrainContext) -> tuple[CommunicablePayload, TrainStats]:
        if len(dataset) == 0:
            raise DataError("local training on an empty dataset")
        params = {k: v.copy() for k, v in payload.fields.items()}
        params.update({k: v.copy() for k, v in state.local_fields.items()})
        state.sgd.lr0 = ctx.lr0
        state.sgd.momentum = ctx.momentum
        params, stats = self._run_epochs(params, state, dataset, ctx)
        new_payload = CommunicablePayload({k: params[k] for k in payload.fields})
        for k in state.local_fields:
            state.local_fields[k] = params[k]
        return new_payload, stats

    def _run_epochs(self, params, state, dataset, ctx) -> tuple[dict, TrainStats]:
        losses: list[float] = []
        n_samples = 0
        for _ in range(ctx.epochs):
            for batch in iterate_batches(dataset, ctx.rng, ctx.batch_size):
                if ctx.audit is not None:
                    ctx.audit.append(np.asarray(batch.master_indices))
                loss, grads = self.grad_step(params, batch, ctx)
                params = sgd_momentum_step(params, grads, state.sgd,
                                           ctx.round_index, ctx.total_rounds)
                losses.append(loss)
                n_samples += batch.features.shape[0]
        mean_loss = float(np.mean(losses)) if losses else 0.0
        return params, TrainStats(mean_loss=mean_loss, n_batches=len(losses), n_samples=n_samples)

    def grad_step(self, params: dict, batch: Batch, ctx: TrainContext) -> tuple[float, dict]:
        raise NotImplementedError

    # -- inference ---------------------------------------------------------
    def build_predictor(self, payload: CommunicablePayload, assets: ModelAssets,
                        class_ids: np.ndarray | None = None,
                        state: ClientTrainState | None = None):
        return CosinePredictor(assets, payload.fields["context"], class_ids)


class CosinePredictor:
    """Scores are per-set cosine means against fixed text features."""

    def __init__(self, assets: ModelAssets, context_vectors: np.ndarray,
                 class_ids: np.ndarray | None):
        feats, _ = text_features_all(assets.encoder, PromptContext(context_vectors),
                                     assets.vocab, class_ids=class_ids)
        self.features = feats  # (m, C, d)
        self.tau = assets.cfg.tau

    def probs(self, image_features: np.ndarray, local_maps=None) -> np.ndarray:
        sims = np.einsum("bd,pcd->pbc", unit_rows(image_features), self.features).mean(axis=0)
        return softmax_temp(sims, self.tau)


class TransportPredictor:
    """Scores are negative transport costs between regions and prompt features."""

    def __init__(self, assets: ModelAssets, context_vectors: np.ndarray,
                 class_ids: np.ndarray | None, eps: float, iters: int, col_relax: float = 1.0):
        feats, _ = text_features_all(assets.encoder, PromptContext(context_vectors),
                                     assets.vocab, class_ids=class_ids)
        self.prompts = feats.transpose(1, 0, 2)  # (C, m, d)
        self.tau = assets.cfg.tau
        self.eps = eps
        self.iters = iters
        self.col_relax = col_relax

    def probs(self, image_features: np.ndarray, local_maps: np.ndarray | None = None) -> np.ndarray:
        if local_maps is None:
            raise ConfigError("transport predictor needs local feature maps")
        costs = 1.0 - np.einsum("bmd,cnd->bcmn", local_maps, self.prompts)
        plans = sinkhorn_batched(costs, self.eps, self.iters, col_relax=self.col_relax)
        logits = -(plans * costs).sum(axis=(-2, -1))
        return softmax_temp(logits, self.tau)


class PromptFLTrainer(LocalTrainer):
    kind = "promptfl"

    def grad_step(self, params, batch, ctx):
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        loss, grads, _ = ce_loss_and_grads(ctx.assets, PromptContext(params["context"]),
                                           xh, labels, ctx.class_ids)
        return loss, {"context": grads}


class KgCoOpTrainer(LocalTrainer):
    kind = "kgcoop"

    def __init__(self, lambda_kg: float = 1.0):
        self.lambda_kg = lambda_kg

    def grad_step(self, params, batch, ctx):
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        loss, grads = loss_kgcoop(ctx.assets, PromptContext(params["context"]), xh, labels,
                                  self.lambda_kg, ctx.class_ids)
        return loss, {"context": grads}


class ProGradTrainer(LocalTrainer):
    kind = "prograd"

    def __init__(self, lambda_pg: float = 1.0):
        self.lambda_pg = lambda_pg

    def grad_step(self, params, batch, ctx):
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        loss, grads = loss_prograd(ctx.assets, PromptContext(params["context"]), xh, labels,
                                   self.lambda_pg, ctx.class_ids)
        return loss, {"context": grads}


class ProDATrainer(LocalTrainer):
    kind = "proda"
    set_multiplier = 2

    def __init__(self, lambda_orth: float = 1.0):
        self.lambda_orth = lambda_orth

    def grad_step(self, params, batch, ctx):
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        loss, grads = loss_proda(ctx.assets, PromptContext(params["context"]), xh, labels,
                                 self.lambda_orth, ctx.class_ids)
        return loss, {"context": grads}


class SRCTrainer(LocalTrainer):
    kind = "src"

    def __init__(self, mu_text: float = 1.0, mu_logit: float = 1.0, window: int = 3,
                 n_templates: int = 3):
        if window < 1:
            raise ConfigError(f"trajectory window must be >= 1, got {window}")
        self.mu_text = mu_text
        self.mu_logit = mu_logit
        self.window = window
        self.n_templates = n_templates

    def _references(self, ctx: TrainContext) -> np.ndarray:
        refs = ctx.assets.reference_features(self.n_templates)
        if ctx.class_ids is not None:
            refs = refs[np.asarray(ctx.class_ids)]
        return refs

    def grad_step(self, params, batch, ctx):
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        loss, grads = loss_src(ctx.assets, PromptContext(params["context"]), xh, labels,
                               self.mu_text, self.mu_logit, ctx.class_ids,
                               reference_features=self._references(ctx))
        return loss, {"context": grads}

    def _run_epochs(self, params, state, dataset, ctx):
        trajectory: list[np.ndarray] = []
        losses: list[float] = []
        n_batches = 0
        n_samples = 0
        for _ in range(ctx.epochs):
            for batch in iterate_batches(dataset, ctx.rng, ctx.batch_size):
                if ctx.audit is not None:
                    ctx.audit.append(np.asarray(batch.master_indices))
                loss, grads = self.grad_step(params, batch, ctx)
                params = sgd_momentum_step(params, grads, state.sgd,
                                           ctx.round_index, ctx.total_rounds)
                losses.append(loss)
                n_batches += 1
                n_samples += batch.features.shape[0]
            trajectory.append(params["context"].copy())
        if trajectory:
            params = dict(params)
            params["context"] = trajectory_average(trajectory, self.window)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        return params, TrainStats(mean_loss=mean_loss, n_batches=n_batches, n_samples=n_samples)


class CoCoOpTrainer(LocalTrainer):
    kind = "cocoop"

    def payload_shapes(self, cfg: ModelConfig) -> dict[str, tuple]:
        return {
            "context": (self.n_sets(cfg), cfg.L, cfg.d_token),
            "meta_w1": (cfg.meta_hidden, cfg.d_image),
            "meta_b1": (cfg.meta_hidden,),
            "meta_w2": (cfg.d_token, cfg.meta_hidden),
            "meta_b2": (cfg.d_token,),
        }

    def init_payload(self, cfg: ModelConfig, rng: np.random.Generator) -> CommunicablePayload:
        fields = {"context": build_prompt_context(cfg, rng, m=self.n_sets(cfg)).vectors}
        fields.update(metanet_init(cfg, rng))
        return CommunicablePayload(fields)

    def grad_step(self, params, batch, ctx):
        assets = ctx.assets
        xh = unit_rows(batch.features)
        labels = ctx.map_labels(batch.labels)
        context = params["context"]
        m = context.shape[0]
        n_batch = xh.shape[0]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        losses = np.zeros(n_batch)
        per_image = []
        sims_rows = []
        for b in range(n_batch):
            bias, cache = metanet_forward(params, xh[b])
            graphs = [
                TextSetGraph(assets.encoder, context[p], assets.vocab,
                             class_ids=ctx.class_ids, bias=bias)
                for p in range(m)
            ]
            feats = np.stack([g.features for g in graphs])      # (m, C, d)
            sims_rows.append(np.einsum("d,pcd->pc", xh[b], feats).mean(axis=0))
            per_image.append((graphs, cache))
        logits = np.stack(sims_rows)                            # (B, C)
        loss, dlogits, _ = softmax_ce_batch(logits, labels, assets.cfg.tau)
        for b in range(n_batch):
            graphs, cache = per_image[b]
            dT = np.outer(dlogits[b] / m, xh[b])                # (C, d)
            dbias_total = np.zeros(context.shape[2])
            for p, g in enumerate(graphs):
                dctx, dbias = g.backward(dT)
                grads["context"][p] += dctx
                dbias_total += dbias
            metanet_backward(params, cache, dbias_total, grads)
        return loss, grads

    def build_predictor(self, payload, assets, class_ids=None, state=None):
        return ConditionedPredictor(assets, payload.fields, class_ids)


class ConditionedPredictor:
    """Image-conditioned prompts: one encode pass per test image."""

    def __init__(self, assets: ModelAssets, fields: dict[str, np.ndarray],
                 class_ids: np.ndarray | None):
        self.assets = assets
        self.fields = fields
        self.class_ids = class_ids

    def probs(self, image_features: np.ndarray, local_maps=None) -> np.ndarray:
        assets = self.assets
        xh = unit_rows(image_features)
        context = self.fields["context"]
        rows = []
        for b in range(xh.shape[0]):
            bias, _ = metanet_forward(self.fields, xh[b])
            feats, _ = text_features_all(assets.encoder, PromptContext(context), assets.vocab,
                                         class_ids=self.class_ids, bias=bias)
            rows.append(np.einsum("d,pcd->pc", xh[b], feats).mean(axis=0))
        return softmax_temp(np.stack(rows), assets.cfg.tau)


class PLOTTrainer(LocalTrainer):
    kind = "plot"

    def __init__(self, ot_eps: float = 0.1, ot_iters: int = 100):
        self.ot_eps = ot_eps
        self.ot_iters = ot_iters

    def grad_step(self, params, batch, ctx):
        labels = ctx.map_labels(batch.labels)
        loss, grads = ot_scores_and_grads(ctx.assets, PromptContext(params["context"]), batch,
                                          labels, self.ot_eps, self.ot_iters,
                                          col_relax=1.0, class_ids=ctx.class_ids)
        return loss, {"context": grads}

    def build_predictor(self, payload, assets, class_ids=None, state=None):
        return TransportPredictor(assets, payload.fields["context"], class_ids,
                                  self.ot_eps, self.ot_iters)


class FedOTPTrainer(LocalTrainer):
    """Consensus + personal prompt pair scored by one-sided relaxed transport.

    In "global" mode both prompt sets travel; in "personalized" mode only
    the consensus half is communicated and the personal half stays in
    client state.
    """

    kind = "fedotp"
    set_multiplier = 2

    def __init__(self, mode: str = "global", ot_relax: float = 0.5,
                 ot_eps: float = 0.1, ot_iters: int = 100):
        if mode not in ("global", "personalized"):
            raise ConfigError(f"fedotp mode must be 'global' or 'personalized', got {mode!r}")
        self.mode = mode
        self.ot_relax = ot_relax
        self.ot_eps = ot_eps
        self.ot_iters = ot_iters

    def payload_shapes(self, cfg: ModelConfig) -> dict[str, tuple]:
        if self.mode == "global":
            return {"context": (2 * cfg.m, cfg.L, cfg.d_token)}
        return {"context_global": (cfg.m, cfg.L, cfg.d_token)}

    def init_payload(self, cfg: ModelConfig, rng: np.random.Generator) -> CommunicablePayload:
        name, = self.payload_shapes(cfg)
        return CommunicablePayload(
            {name: build_prompt_context(cfg, rng, m=self.payload_shapes(cfg)[name][0]).vectors}
        )

    def init_state(self, cfg, rng, lr0=0.002, momentum=0.9):
        state = super().init_state(cfg, rng, lr0, momentum)
        if self.mode == "personalized":
            state.local_fields["context_local"] = build_prompt_context(cfg, rng, m=cfg.m).vectors
        return state

    def _stacked(self, params) -> np.ndarray:
        if self.mode == "global":
            return params["context"]
        return np.concatenate([params["context_global"], params["context_local"]], axis=0)

    def grad_step(self, params, batch, ctx):
        labels = ctx.map_labels(batch.labels)
        stack = self._stacked(params)
        loss, grads = ot_scores_and_grads(ctx.assets, PromptContext(stack), batch, labels,
                                          self.ot_eps, self.ot_iters,
                                          col_relax=self.ot_relax, class_ids=ctx.class_ids)
        if self.mode == "global":
            return loss, {"context": grads}
        half = params["context_global"].shape[0]
        return loss, {"context_global": grads[:half], "context_local": grads[half:]}

    def build_predictor(self, payload, assets, class_ids=None, state=None):
        if self.mode == "global":
            stack = payload.fields["context"]
        else:
            if state is None:
                raise ConfigError("personalized transport prediction needs the client state")
            stack = np.concatenate(
                [payload.fields["context_global"], state.local_fields["context_local"]], axis=0
            )
        return TransportPredictor(assets, stack, class_ids, self.ot_eps, self.ot_iters,
                                  col_relax=self.ot_relax)


_TRAINERS = {
    "promptfl": PromptFLTrainer,
    "kgcoop": KgCoOpTrainer,
    "prograd": ProGradTrainer,
    "proda": ProDATrainer,
    "src": SRCTrainer,
    "cocoop": CoCoOpTrainer,
    "plot": PLOTTrainer,
    "fedotp": FedOTPTrainer,
}


def make_trainer(kind: str, **hyper) -> LocalTrainer:
    if kind not in _TRAINERS:
        raise ConfigError(f"unknown trainer kind {kind!r}; choose from {sorted(_TRAINERS)}")
    return _TRAINERS[kind](**hyper)
