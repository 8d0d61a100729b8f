"""Server/client round orchestration and communication accounting."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .algorithms import (
    ClientTrainState,
    CommunicablePayload,
    LocalTrainer,
    TrainContext,
    TrainStats,
)
from .data import ClientDataset, MasterDataset, PartitionPlan
from .errors import AggregationError, ConfigError
from .vlm import ModelAssets, ModelConfig
from . import rngs

log = logging.getLogger(__name__)

PROTOCOLS = ("standard", "partial", "personalized", "centralized")

# (num_clients, participation_fraction) each protocol uses unless overridden
PROTOCOL_DEFAULTS = {
    "standard": (10, 1.0),
    "partial": (100, 0.1),
    "personalized": (10, 1.0),
    "centralized": (1, 1.0),
}


@dataclass
class FederationConfig:
    protocol: str = "standard"
    num_clients: int = 10
    participation_fraction: float = 1.0
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 16
    lr0: float = 0.002
    momentum: float = 0.9
    eval_every: int = 1

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"federation.protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not (0.0 < self.participation_fraction <= 1.0):
            raise ConfigError(
                f"federation.participation_fraction must lie in (0, 1], got {self.participation_fraction}"
            )
        if self.num_clients < 1:
            raise ConfigError(f"federation.num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 1:
            raise ConfigError(f"federation.rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"federation.local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"federation.batch_size must be >= 1, got {self.batch_size}")
        if self.protocol == "centralized" and self.num_clients != 1:
            raise ConfigError("centralized protocol uses exactly one client")
        if self.protocol in ("standard", "personalized", "centralized") and self.participation_fraction != 1.0:
            raise ConfigError(f"{self.protocol} protocol uses full participation")

    @classmethod
    def for_protocol(cls, protocol: str, **overrides) -> "FederationConfig":
        clients, fraction = PROTOCOL_DEFAULTS.get(protocol, (10, 1.0))
        merged = {"protocol": protocol, "num_clients": clients,
                  "participation_fraction": fraction}
        merged.update(overrides)
        return cls(**merged)

    @property
    def sample_size(self) -> int:
        return max(1, int(round(self.participation_fraction * self.num_clients)))


@dataclass
class CostLedger:
    """Scalars moved between server and clients, both directions."""

    downloaded: list[int] = field(default_factory=list)
    uploaded: list[int] = field(default_factory=list)

    def record_round(self, down: int, up: int) -> None:
        self.downloaded.append(int(down))
        self.uploaded.append(int(up))

    @property
    def chi(self) -> int:
        return sum(self.downloaded) + sum(self.uploaded)

    @property
    def chi_millions(self) -> float:
        return self.chi / 1e6

    @staticmethod
    def closed_form(payload_scalars: int, rounds: int, sampled_clients: int) -> int:
        """Total scalars when payload and sample size are constant."""
        return payload_scalars * rounds * sampled_clients * 2


def communication_cost_millions(trainer: LocalTrainer, model_cfg: ModelConfig,
                                fed_cfg: FederationConfig) -> float:
    """Closed-form total communication in millions of scalars."""
    scalars = trainer.payload_scalars(model_cfg)
    return CostLedger.closed_form(scalars, fed_cfg.rounds, fed_cfg.sample_size) / 1e6


@dataclass
class Client:
    client_id: int
    dataset: ClientDataset
    state: ClientTrainState
    test_set: ClientDataset | None = None


@dataclass
class RoundReport:
    round_index: int
    sampled: list[int]
    participating: list[int]
    skipped_empty: list[int]
    failed: list[int]
    client_losses: dict[int, float]
    weights: dict[int, float]
    download_scalars: int
    upload_scalars: int

    def to_record(self) -> dict:
        return {
            "round": self.round_index,
            "sampled": self.sampled,
            "participating": self.participating,
            "skipped_empty": self.skipped_empty,
            "failed": self.failed,
            "mean_loss": (sum(self.client_losses.values()) / len(self.client_losses))
            if self.client_losses else None,
            "download_scalars": self.download_scalars,
            "upload_scalars": self.upload_scalars,
        }


@dataclass
class ServerState:
    payload: CommunicablePayload
    round_index: int = 0
    ledger: CostLedger = field(default_factory=CostLedger)
    reports: list[RoundReport] = field(default_factory=list)


def sample_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement, sorted for deterministic aggregation."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"participation fraction must lie in (0, 1], got {fraction}")
    k = int(round(fraction * num_clients))
    if k < 1:
        raise ConfigError(f"participation fraction {fraction} selects no clients out of {num_clients}")
    if k >= num_clients:
        return np.arange(num_clients)
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def compute_weights(sizes: np.ndarray) -> np.ndarray:
    """Data-size-normalised aggregation weights."""
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise AggregationError("cannot weight an all-empty client sample")
    return sizes / total


def fedavg_aggregate(payloads: list[CommunicablePayload],
                     weights: np.ndarray) -> CommunicablePayload:
    """Elementwise weighted sum, accumulated in the given (id-ascending) order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(payloads) == 0:
        raise AggregationError("nothing to aggregate")
    if len(payloads) != len(weights):
        raise AggregationError("payload/weight count mismatch")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise AggregationError(f"weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
    keys = list(payloads[0].fields)
    for p in payloads[1:]:
        if list(p.fields) != keys or any(
            p.fields[k].shape != payloads[0].fields[k].shape for k in keys
        ):
            raise AggregationError("payload shapes differ across clients")
    out = {k: np.zeros_like(payloads[0].fields[k]) for k in keys}
    for w, p in zip(weights, payloads):
        for k in keys:
            out[k] = out[k] + w * p.fields[k]
    return CommunicablePayload(out)


def run_round(server: ServerState, clients: list[Client], trainer: LocalTrainer,
              fed_cfg: FederationConfig, assets: ModelAssets, seed: int,
              class_ids: np.ndarray | None = None, audit: list | None = None,
              client_order: list[int] | None = None) -> RoundReport:
    """One communication round: sample, broadcast, train, collect, aggregate."""
    t = server.round_index
    rng = rngs.derive_rng(seed, rngs.SAMPLING, t)
    sampled = sample_clients(fed_cfg.num_clients, fed_cfg.participation_fraction, rng)
    participating = [int(c) for c in sampled if len(clients[c].dataset) > 0]
    skipped = [int(c) for c in sampled if len(clients[c].dataset) == 0]
    for cid in skipped:
        log.warning("round %d: client %d has no data, skipped", t, cid)
    report = RoundReport(
        round_index=t, sampled=[int(c) for c in sampled], participating=participating,
        skipped_empty=skipped, failed=[], client_losses={}, weights={},
        download_scalars=0, upload_scalars=0,
    )
    if not participating:
        log.warning("round %d: no client holds data, round skipped", t)
        server.round_index += 1
        server.ledger.record_round(0, 0)
        server.reports.append(report)
        return report

    declared = trainer.payload_scalars(assets.cfg)
    report.download_scalars = declared * len(participating)

    results: dict[int, tuple[CommunicablePayload, TrainStats]] = {}
    order = participating if client_order is None else [c for c in client_order if c in participating]
    for cid in order:
        client = clients[cid]
        ctx = TrainContext(
            assets=assets,
            round_index=t,
            total_rounds=fed_cfg.rounds,
            rng=rngs.derive_rng(seed, rngs.CLIENT, cid, t),
            batch_size=fed_cfg.batch_size,
            epochs=fed_cfg.local_epochs,
            lr0=fed_cfg.lr0,
            momentum=fed_cfg.momentum,
            class_ids=class_ids,
            audit=audit,
        )
        try:
            payload, stats = trainer.local_train(server.payload.copy(), client.state,
                                                 client.dataset, ctx)
        except Exception:  # noqa: BLE001 - failed clients are excluded, not fatal
            log.exception("round %d: client %d failed, excluded from aggregation", t, cid)
            report.failed.append(cid)
            continue
        if payload.scalar_count != declared:
            raise AggregationError(
                f"client {cid} returned {payload.scalar_count} scalars, declared {declared}"
            )
        results[cid] = (payload, stats)

    if not results:
        log.warning("round %d: every client failed, round skipped", t)
        server.round_index += 1
        server.ledger.record_round(report.download_scalars, 0)
        server.reports.append(report)
        return report

    ordered_ids = sorted(results)
    report.upload_scalars = declared * len(ordered_ids)
    weights = compute_weights(np.array([len(clients[c].dataset) for c in ordered_ids]))
    aggregated = fedavg_aggregate([results[c][0] for c in ordered_ids], weights)
    server.payload = aggregated
    report.client_losses = {c: results[c][1].mean_loss for c in ordered_ids}
    report.weights = {c: float(w) for c, w in zip(ordered_ids, weights)}
    server.ledger.record_round(report.download_scalars, report.upload_scalars)
    server.round_index += 1
    server.reports.append(report)
    return report


@dataclass
class FederationOutcome:
    server: ServerState
    eval_history: list[dict]          # one record per evaluated round
    best: dict[str, float]            # max over rounds per metric


def run_federation(trainer: LocalTrainer, clients: list[Client], fed_cfg: FederationConfig,
                   assets: ModelAssets, seed: int, eval_fn=None,
                   class_ids: np.ndarray | None = None,
                   audit: list | None = None) -> FederationOutcome:
    """Full communication loop for one seed, tracking best evaluation metrics."""
    server = ServerState(
        payload=trainer.init_payload(assets.cfg, rngs.derive_rng(seed, rngs.PROMPT_INIT))
    )
    history: list[dict] = []
    best: dict[str, float] = {}
    for t in range(fed_cfg.rounds):
        report = run_round(server, clients, trainer, fed_cfg, assets, seed,
                           class_ids=class_ids, audit=audit)
        if eval_fn is not None and ((t + 1) % fed_cfg.eval_every == 0 or t == fed_cfg.rounds - 1):
            metrics = eval_fn(server, clients, t)
            record = {"round": t, **metrics}
            history.append(record)
            for key, value in metrics.items():
                if value is None:
                    continue
                if key not in best or value > best[key]:
                    best[key] = value
        else:
            history.append({"round": t})
        history[-1]["train_loss"] = (
            sum(report.client_losses.values()) / len(report.client_losses)
            if report.client_losses else None
        )
        history[-1]["chi"] = server.ledger.chi
    return FederationOutcome(server=server, eval_history=history, best=best)


def build_clients(master: MasterDataset, plan: PartitionPlan, trainer: LocalTrainer,
                  cfg: ModelConfig, fed_cfg: FederationConfig, seed: int,
                  test_plan: PartitionPlan | None = None,
                  test_master: MasterDataset | None = None) -> list[Client]:
    """Materialise per-client datasets and fresh training state from partition plans."""
    clients = []
    for cid, indices in enumerate(plan.client_indices):
        state = trainer.init_state(cfg, rngs.derive_rng(seed, rngs.CLIENT, cid),
                                   lr0=fed_cfg.lr0, momentum=fed_cfg.momentum)
        test_set = None
        if test_plan is not None:
            source = test_master if test_master is not None else master
            test_set = ClientDataset.from_master(source, test_plan.client_indices[cid])
        clients.append(Client(
            client_id=cid,
            dataset=ClientDataset.from_master(master, indices),
            state=state,
            test_set=test_set,
        ))
    return clients
