"""Frozen vision-language surrogate.

A deterministic, seeded stand-in for a pretrained text encoder and image
feature source. Only the prompt context (and, for conditioned prompts,
a small trainable net) ever receives gradients; encoder weights and the
class vocabulary are frozen at construction and shared by value across
server and clients.

Gradients are computed by hand-written reverse passes through each
encoder variant; `numerics.finite_diff_gradient` is the test oracle.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import softmax_ce_batch, softmax_temp, cosine_similarity
from . import rngs

ENCODER_VARIANTS = ("linear_pool", "attention_block")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and frozen-surrogate knobs shared by one experiment."""

    m: int = 1              # prompt sets (the "number of prompts" knob)
    L: int = 4              # context tokens per set
    d_token: int = 512
    d_feature: int = 1024   # text feature width; must equal d_image
    d_image: int = 1024
    encoder: str = "linear_pool"
    tau: float = 0.07
    seed: int = 0           # seeds encoder weights, vocabulary, handcrafted context
    init_std: float = 0.02
    token_scale: float = 0.05  # magnitude of frozen class/position embeddings
    n_class_tokens: int = 1
    meta_hidden: int = 64
    local_features: int = 4    # per-image region features for transport scoring

    def __post_init__(self):
        for name in ("m", "L", "d_token", "d_feature", "d_image", "n_class_tokens",
                     "meta_hidden", "local_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"model.tau must be positive, got {self.tau}")
        if self.encoder not in ENCODER_VARIANTS:
            raise ConfigError(f"model.encoder must be one of {ENCODER_VARIANTS}, got {self.encoder!r}")
        if self.d_feature != self.d_image:
            raise ConfigError(
                "model.d_feature must equal model.d_image: text and image features "
                f"share one similarity space (got {self.d_feature} vs {self.d_image})"
            )
        if self.init_std < 0 or self.token_scale <= 0:
            raise ConfigError("model.init_std must be >= 0 and model.token_scale > 0")


@dataclass
class PromptContext:
    """Learnable soft-prompt tokens, shape (sets, tokens, width)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3:
            raise ConfigError(f"prompt context must be (sets, tokens, width), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("prompt context contains non-finite entries")
        self.vectors = v

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def L(self) -> int:
        return self.vectors.shape[1]

    @property
    def d_token(self) -> int:
        return self.vectors.shape[2]

    @property
    def param_count(self) -> int:
        return self.vectors.size

    def copy(self) -> "PromptContext":
        return PromptContext(self.vectors.copy())


def build_prompt_context(cfg: ModelConfig, rng: np.random.Generator, m: int | None = None) -> PromptContext:
    """Gaussian-initialised trainable context."""
    sets = cfg.m if m is None else m
    return PromptContext(rng.normal(size=(sets, cfg.L, cfg.d_token)) * cfg.init_std)


def build_handcrafted_context(seed: int, L: int, d_token: int, m: int = 1,
                              std: float = 0.02, template: int = 0) -> PromptContext:
    """Fixed non-trained context; identical everywhere for a given seed.

    `template` selects among alternative fixed phrasings (used to average
    several references for self-regularised training).
    """
    if L < 1 or d_token < 1:
        raise ConfigError("handcrafted context needs positive dimensions")
    rng = rngs.derive_rng(seed, rngs.HANDCRAFTED, template)
    return PromptContext(rng.normal(size=(m, L, d_token)) * std)


@dataclass
class ClassVocabulary:
    """Frozen per-class token sequences, appended after the context."""

    class_names: list[str]
    tokens: np.ndarray  # (C, n_class_tokens, d_token)

    @classmethod
    def build(cls, cfg: ModelConfig, class_count: int,
              class_names: list[str] | None = None) -> "ClassVocabulary":
        if class_names is None:
            class_names = [f"class_{j}" for j in range(class_count)]
        rows = []
        for j in range(class_count):
            r = rngs.derive_rng(cfg.seed, rngs.VOCAB, j)
            e = r.normal(size=(cfg.n_class_tokens, cfg.d_token))
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            rows.append(e * cfg.token_scale)
        return cls(class_names=class_names, tokens=np.array(rows))

    @property
    def class_count(self) -> int:
        return self.tokens.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(self.tokens.tobytes()).hexdigest()


class FrozenTextEncoder:
    """Seeded frozen map from token sequences to unit text features.

    Variants:
      linear_pool     mean-pool tokens -> fixed linear map -> tanh -> normalize
      attention_block one frozen self-attention block (with fixed position
                      offsets and residual) before the same pooling head
    Weight magnitudes are calibrated to `token_scale` so the tanh head
    stays responsive for inputs at that scale.
    """

    def __init__(self, variant: str, d_token: int, d_feature: int, seed: int,
                 token_scale: float = 0.05, gain: float = 4.0, score_scale: float = 1.0):
        if variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown encoder variant {variant!r}")
        self.variant = variant
        self.d_token = d_token
        self.d_feature = d_feature
        self.seed = seed
        self.token_scale = token_scale
        rng = rngs.derive_rng(seed, rngs.ENCODER)
        w: dict[str, np.ndarray] = {}
        if variant == "attention_block":
            a = np.sqrt(score_scale) / token_scale
            w["wq"] = rng.normal(size=(d_token, d_token)) * a / np.sqrt(d_token)
            w["wk"] = rng.normal(size=(d_token, d_token)) * a / np.sqrt(d_token)
            w["wv"] = rng.normal(size=(d_token, d_token)) / np.sqrt(d_token)
        w["w_out"] = rng.normal(size=(d_feature, d_token)) * gain / (token_scale * np.sqrt(d_token))
        w["b_out"] = rng.normal(size=d_feature) * 0.1
        self.weights = w
        self._pos_cache = np.zeros((0, d_token))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "FrozenTextEncoder":
        return cls(cfg.encoder, cfg.d_token, cfg.d_feature, cfg.seed, token_scale=cfg.token_scale)

    def _positions(self, length: int) -> np.ndarray:
        if length > self._pos_cache.shape[0]:
            rows = [self._pos_cache[s] for s in range(self._pos_cache.shape[0])]
            for s in range(self._pos_cache.shape[0], length):
                r = rngs.derive_rng(self.seed, rngs.ENCODER, 1000 + s)
                rows.append(r.normal(size=self.d_token) * (0.5 * self.token_scale) / np.sqrt(self.d_token))
            self._pos_cache = np.array(rows)
        return self._pos_cache[:length]

    def encode(self, tokens: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Encode a stack of sequences (n, S, d_token) -> unit features (n, d_feature)."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tokens.shape[-1] != self.d_token:
            raise ConfigError(f"token width {tokens.shape[-1]} != encoder d_token {self.d_token}")
        n, S, d = tokens.shape
        w = self.weights
        if self.variant == "attention_block":
            X = tokens + self._positions(S)[None]
            Q = X @ w["wq"]
            K = X @ w["wk"]
            V = X @ w["wv"]
            scores = Q @ K.transpose(0, 2, 1) / np.sqrt(d)
            scores -= scores.max(axis=-1, keepdims=True)
            A = np.exp(scores)
            A /= A.sum(axis=-1, keepdims=True)
            Y = X + A @ V
            h = Y.mean(axis=1)
            attn_cache = (Q, K, V, A)
        else:
            h = tokens.mean(axis=1)
            attn_cache = None
        z = h @ w["w_out"].T + w["b_out"]
        u = np.tanh(z)
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        t = u / norms
        return t, (S, u, norms, t, attn_cache)

    def backward(self, cache: tuple, dfeatures: np.ndarray) -> np.ndarray:
        """Gradient of features w.r.t. the input tokens, (n, S, d_token)."""
        S, u, norms, t, attn_cache = cache
        dfeatures = np.asarray(dfeatures, dtype=np.float64)
        if dfeatures.ndim == 1:
            dfeatures = dfeatures[None]
        w = self.weights
        du = (dfeatures - (dfeatures * t).sum(axis=1, keepdims=True) * t) / norms
        dz = du * (1.0 - u * u)
        dh = dz @ w["w_out"]
        dY = np.repeat(dh[:, None, :] / S, S, axis=1)
        if self.variant == "attention_block":
            Q, K, V, A = attn_cache
            dX = dY.copy()
            dA = dY @ V.transpose(0, 2, 1)
            dV = A.transpose(0, 2, 1) @ dY
            dscores = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(self.d_token)
            dQ = dscores @ K
            dK = dscores.transpose(0, 2, 1) @ Q
            dX += dQ @ w["wq"].T + dK @ w["wk"].T + dV @ w["wv"].T
            return dX
        return dY

    def digest(self) -> str:
        hasher = hashlib.sha256()
        for key in sorted(self.weights):
            hasher.update(key.encode())
            hasher.update(self.weights[key].tobytes())
        return hasher.hexdigest()


def unit_rows(x: np.ndarray, what: str = "features") -> np.ndarray:
    """Row-normalise, rejecting zero rows."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError(f"{what} contain a zero row")
    return x / norms


class TextSetGraph:
    """Forward pass of one prompt set over selected classes, with reverse mode.

    Keeps the caches needed to push a gradient on the emitted unit
    features back onto the context tokens (and the shared per-token bias
    when conditioned prompts are in play). Class tokens and encoder
    weights never receive gradients.
    """

    def __init__(self, encoder: FrozenTextEncoder, context_set: np.ndarray,
                 vocab: ClassVocabulary, class_ids: np.ndarray | None = None,
                 bias: np.ndarray | None = None):
        if context_set.ndim != 2:
            raise ConfigError("context_set must be (L, d_token)")
        if context_set.shape[1] != vocab.tokens.shape[2]:
            raise ConfigError("context and vocabulary token widths differ")
        self.encoder = encoder
        self.L = context_set.shape[0]
        ids = np.arange(vocab.class_count) if class_ids is None else np.asarray(class_ids)
        self.class_ids = ids
        ctx = context_set if bias is None else context_set + bias[None, :]
        seqs = np.concatenate(
            [np.broadcast_to(ctx, (len(ids),) + ctx.shape), vocab.tokens[ids]], axis=1
        )
        self.features, self._cache = encoder.encode(seqs)

    def backward(self, dfeatures: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d context tokens (L, d_token), d bias (d_token,)) from d features (C, d_feature)."""
        dtokens = self.encoder.backward(self._cache, dfeatures)
        dctx = dtokens[:, : self.L, :].sum(axis=0)
        dbias = dctx.sum(axis=0)
        return dctx, dbias


def encode_text(encoder: FrozenTextEncoder, context: PromptContext, set_index: int,
                vocab: ClassVocabulary, class_j: int, bias: np.ndarray | None = None) -> np.ndarray:
    """Unit text feature of one class under one prompt set."""
    if not (0 <= set_index < context.m):
        raise ConfigError(f"set_index {set_index} out of range for {context.m} prompt sets")
    if not (0 <= class_j < vocab.class_count):
        raise ConfigError(f"class {class_j} out of range for vocabulary of {vocab.class_count}")
    graph = TextSetGraph(encoder, context.vectors[set_index], vocab,
                         class_ids=np.array([class_j]), bias=bias)
    return graph.features[0]


def text_features_all(encoder: FrozenTextEncoder, context: PromptContext,
                      vocab: ClassVocabulary, class_ids: np.ndarray | None = None,
                      bias: np.ndarray | None = None) -> tuple[np.ndarray, list[TextSetGraph]]:
    """Features for every prompt set: ((m, C, d_feature), per-set graphs)."""
    graphs = [
        TextSetGraph(encoder, context.vectors[p], vocab, class_ids=class_ids, bias=bias)
        for p in range(context.m)
    ]
    return np.stack([g.features for g in graphs]), graphs


def predict(image_feature: np.ndarray, text_features: list[np.ndarray] | np.ndarray,
            tau: float) -> np.ndarray:
    """Class probabilities of one image: temperature softmax over cosine similarities."""
    feats = list(text_features)
    if len(feats) == 0:
        raise DomainError("predict needs at least one class feature")
    sims = np.array([cosine_similarity(image_feature, t) for t in feats])
    return softmax_temp(sims, tau)


def cosine_scores(image_features: np.ndarray, class_features: np.ndarray) -> np.ndarray:
    """Batched cosine similarities (B, C); inputs are row-normalised first."""
    return unit_rows(image_features) @ unit_rows(class_features, "class features").T


def prompt_gradients(encoder: FrozenTextEncoder, context: PromptContext, batch,
                     vocab: ClassVocabulary, tau: float,
                     class_ids: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Exact gradient of mean cross-entropy w.r.t. the context tokens only.

    With several prompt sets the per-class score is the mean of each
    set's cosine score. Returns (gradient shaped like the context, mean
    loss).
    """
    feats = np.asarray(batch.features, dtype=np.float64)
    labels = np.asarray(batch.labels)
    if feats.shape[0] == 0:
        raise DomainError("empty batch")
    set_feats, graphs = text_features_all(encoder, context, vocab, class_ids=class_ids)
    xh = unit_rows(feats)
    sims = np.einsum("bd,pcd->pbc", xh, set_feats)  # (m, B, C)
    mean_sims = sims.mean(axis=0)
    loss, dlogits, _ = softmax_ce_batch(mean_sims, labels, tau)
    dsims = dlogits / context.m
    grads = np.zeros_like(context.vectors)
    # ambient partial w.r.t. the unit feature; the graph backward applies
    # the normalisation Jacobian, so tangential projection is implicit
    dT = np.einsum("bc,bd->cd", dsims, xh)
    for p, graph in enumerate(graphs):
        grads[p], _ = graph.backward(dT)
    return grads, loss


def synth_local_features(image_feature: np.ndarray, M: int, rng: np.random.Generator,
                         spread: float = 0.1) -> np.ndarray:
    """M unit-norm perturbed views of one global feature (region surrogate)."""
    if M < 1:
        raise ConfigError(f"local feature count must be >= 1, got {M}")
    base = np.asarray(image_feature, dtype=np.float64)
    rows = base[None, :] + spread * rng.normal(size=(M, base.shape[0]))
    return unit_rows(rows, "local features")


@dataclass
class ModelAssets:
    """Everything frozen for one experiment: encoder, vocabulary, references."""

    cfg: ModelConfig
    encoder: FrozenTextEncoder
    vocab: ClassVocabulary
    handcrafted: PromptContext
    hand_features: np.ndarray  # (C, d_feature), from the handcrafted context
    _reference_cache: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return self.vocab.class_count

    def hand_features_for(self, class_ids: np.ndarray | None) -> np.ndarray:
        if class_ids is None:
            return self.hand_features
        return self.hand_features[np.asarray(class_ids)]

    def zero_shot_scores(self, image_features: np.ndarray,
                         class_ids: np.ndarray | None = None) -> np.ndarray:
        return cosine_scores(image_features, self.hand_features_for(class_ids))

    def zero_shot_probs(self, image_features: np.ndarray,
                        class_ids: np.ndarray | None = None) -> np.ndarray:
        return softmax_temp(self.zero_shot_scores(image_features, class_ids), self.cfg.tau)

    def reference_features(self, n_templates: int = 3) -> np.ndarray:
        """Unit class features averaged over several fixed context phrasings."""
        if n_templates not in self._reference_cache:
            acc = np.zeros_like(self.hand_features)
            for tpl in range(n_templates):
                ctx = build_handcrafted_context(self.cfg.seed, self.cfg.L, self.cfg.d_token,
                                                std=self.cfg.init_std, template=tpl)
                feats, _ = text_features_all(self.encoder, ctx, self.vocab)
                acc += feats[0]
            self._reference_cache[n_templates] = unit_rows(acc / n_templates)
        return self._reference_cache[n_templates]


def build_assets(cfg: ModelConfig, class_count: int,
                 class_names: list[str] | None = None) -> ModelAssets:
    encoder = FrozenTextEncoder.from_config(cfg)
    vocab = ClassVocabulary.build(cfg, class_count, class_names)
    handcrafted = build_handcrafted_context(cfg.seed, cfg.L, cfg.d_token, std=cfg.init_std)
    feats, _ = text_features_all(encoder, handcrafted, vocab)
    return ModelAssets(cfg=cfg, encoder=encoder, vocab=vocab,
                       handcrafted=handcrafted, hand_features=feats[0])
