"""Server loop: client sampling, local meta updates, averaging, evaluation."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import ClientDataset, DatasetConfig
from .metagrad import ENGINES, BatchPlan, HyperParams, finetune_path, local_update
from .nn import ModelSpec
from .rng import LocalStreams, RngStream

log = logging.getLogger(__name__)

SERVER_ID = "server"


class ClientUpdateError(RuntimeError):
    def __init__(self, client_id: int, round_: int, cause: Exception):
        self.client_id = client_id
        self.round = round_
        super().__init__(f"client {client_id} failed in round {round_}: {cause}")


@dataclass(frozen=True)
class FedConfig:
    n_clients: int
    participation: float
    rounds: int
    hp: HyperParams
    engine: str = "exact"
    eval_nu: int = 0
    seed: int = 0
    init_seed: int = 0
    hessian_mode: str = "hvp"
    stochastic_eval: bool = False
    eval_batch: int = 40
    workers: int = 1
    extra_eval_nus: tuple[int, ...] = ()

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must be in (0, 1]")
        if self.n_participants < 1:
            raise ValueError("floor(participation * n_clients) must be >= 1")
        if self.eval_nu < 0 or self.rounds < 0 or any(n < 0 for n in self.extra_eval_nus):
            raise ValueError("eval_nu and rounds must be >= 0")
        if self.engine != "fo" and self.hp.nu < 1:
            raise ValueError("nu=0 (FedAvg mode) is only available with the fo engine")

    @property
    def eval_nus(self) -> tuple[int, ...]:
        return (self.eval_nu, *sorted(set(self.extra_eval_nus) - {self.eval_nu}))

    @property
    def n_participants(self) -> int:
        return int(np.floor(self.participation * self.n_clients + 1e-9))


@dataclass(frozen=True)
class SimState:
    round: int
    model: np.ndarray


@dataclass
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    model_hash: str
    mean_eval_accuracy: float
    per_client_accuracy: list[float] = field(default_factory=list)
    accuracy_by_eval_nu: dict[int, float] = field(default_factory=dict)
    wall_ms: float = 0.0


def model_hash(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype=np.float64).tobytes()).hexdigest()[:16]


def select_clients(seed: int, round_: int, n_clients: int, k: int) -> list[int]:
    gen = RngStream(seed, SERVER_ID, round_, "select").generator
    return sorted(int(i) for i in gen.choice(n_clients, size=k, replace=False))


def evaluate(global_model, clients: list[ClientDataset], spec: ModelSpec, alpha: float, eval_nu: int,
             *, stochastic: bool = False, batch_size: int = 40, seed: int = 0, round_: int = 0):
    """Accuracy of the global model after ``eval_nu`` fine-tuning steps per client.

    Fine-tuning runs on each client's train split (full batch by default) and
    accuracy is measured on its test split. Returns ``(mean, per_client)``.
    Training state and training streams are never touched.
    """
    if eval_nu < 0:
        raise ValueError("eval_nu must be >= 0")
    w = nn._vec(global_model)
    accs = []
    for c in clients:
        if len(c.test) == 0:
            raise ValueError(f"client {c.client_id} has an empty test set")
        if stochastic:
            stream = RngStream(seed, c.client_id, round_, "eval")
            path = finetune_path(spec, w, c, alpha, eval_nu, stream, sizes=batch_size)
        else:
            path = finetune_path(spec, w, c, alpha, eval_nu, full_batch=True)
        pred = nn.predict(spec, path[-1], c.test.inputs)
        accs.append(float(np.mean(pred == c.test.labels)))
    return float(np.mean(accs)), accs


def _client_run(spec, w, client, cfg: FedConfig, round_: int) -> np.ndarray:
    streams = LocalStreams.derive(cfg.seed, client.client_id, round_)
    kw = {"hessian_mode": cfg.hessian_mode} if cfg.engine == "exact" else {}
    try:
        for _ in range(cfg.hp.tau):
            w = local_update(cfg.engine, spec, w, client, cfg.hp, streams, **kw).updated
    except Exception as exc:
        raise ClientUpdateError(client.client_id, round_, exc) from exc
    return w


def _record(round_, participants, w, spec, clients, cfg) -> RoundRecord:
    by_nu = {}
    per = []
    for nu in cfg.eval_nus:
        mean, accs = evaluate(w, clients, spec, cfg.hp.alpha, nu, stochastic=cfg.stochastic_eval,
                              batch_size=cfg.eval_batch, seed=cfg.seed, round_=round_)
        by_nu[nu] = mean
        if nu == cfg.eval_nu:
            per = accs
    return RoundRecord(round_, tuple(participants), model_hash(w), by_nu[cfg.eval_nu], per, by_nu)


def run_round(state: SimState, cfg: FedConfig, spec: ModelSpec, clients: list[ClientDataset],
              pool: ThreadPoolExecutor | None = None) -> tuple[SimState, RoundRecord]:
    """Advance the global model by one communication round.

    Samples ``floor(r N)`` clients uniformly without replacement, runs
    ``tau`` local updates on each starting from the current model, and
    replaces the global model by the plain average of the results.
    """
    k = state.round
    chosen = select_clients(cfg.seed, k, len(clients), cfg.n_participants)

    def job(cid):
        return _client_run(spec, state.model, clients[cid], cfg, k)

    if pool is not None:
        results = list(pool.map(job, chosen))
    else:
        results = [job(cid) for cid in chosen]
    w_next = np.mean(np.stack(results), axis=0)
    new = SimState(k + 1, w_next)
    return new, _record(k + 1, chosen, w_next, spec, clients, cfg)


def simulate(cfg: FedConfig, spec: ModelSpec, clients: list[ClientDataset], w0=None) -> tuple[list[RoundRecord], np.ndarray]:
    """Run ``cfg.rounds`` rounds; returns the ``rounds + 1`` records and final model.

    Record 0 evaluates the initial model.
    """
    if len(clients) != cfg.n_clients:
        raise ValueError(f"config expects {cfg.n_clients} clients, got {len(clients)}")
    w = nn.init_params(spec, cfg.init_seed).values if w0 is None else nn._vec(w0).copy()
    state = SimState(0, w)
    t0 = time.perf_counter()
    records = [_record(0, (), w, spec, clients, cfg)]
    records[0].wall_ms = (time.perf_counter() - t0) * 1000.0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.rounds):
            t0 = time.perf_counter()
            state, rec = run_round(state, cfg, spec, clients, pool)
            rec.wall_ms = (time.perf_counter() - t0) * 1000.0
            records.append(rec)
            log.debug("round %d acc %.4f", rec.round, rec.mean_eval_accuracy)
    finally:
        if pool is not None:
            pool.shutdown()
    return records, state.model


def run_experiment(cfg: FedConfig, dataset_cfg: DatasetConfig, hidden=(80, 60)) -> list[RoundRecord]:
    """Build data and an MLP from configs, then simulate."""
    clients, n_features, classes = dataset_cfg.build(cfg.n_clients)
    spec = nn.MLPSpec(n_features, tuple(hidden), classes)
    records, _ = simulate(cfg, spec, clients)
    return records


def with_engine(cfg: FedConfig, engine: str, nu: int, eval_nu: int | None = None) -> FedConfig:
    """Copy of ``cfg`` switched to another engine / number of fine-tuning steps."""
    hp = cfg.hp
    plan = hp.batch_plan
    size = plan.d_sizes[0]
    hsize = plan.dprime_sizes[0] if plan.dprime_sizes else size
    hp = replace(hp, nu=nu, batch_plan=BatchPlan.uniform(nu, size, hsize))
    return replace(cfg, engine=engine, hp=hp, eval_nu=cfg.eval_nu if eval_nu is None else eval_nu)


__all__ = [
    "FedConfig", "SimState", "RoundRecord", "ClientUpdateError", "evaluate", "run_round",
    "simulate", "run_experiment", "select_clients", "model_hash", "with_engine",
]
