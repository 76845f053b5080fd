"""Round-based federated learning simulator.

Every random draw is keyed by ``(seed, purpose, client, round)`` through
``numpy.random.SeedSequence``, so a benign client's local training is the same
whether or not malicious clients exist; the paired run relies on this.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .config import ConfigError, ExperimentConfig
from .data import (LabeledDataset, TriggerSpec, dirichlet_partition, find_idx_pair, gen_synthetic,
                   load_idx, poison_dataset)
from .defenses import AggregationOutcome, ClientUpdate, aggregate, principal_sign
from .evaluation import (RoundMetrics, empirical_kappa, estimate_nu_zeta, evaluate,
                         propagation_error_bound)
from .model import MlpModel, TrainConfig, init_model, local_train, predict

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "ma", "ba", "ra", "n_selected", "sel_tp", "sel_fp", "clip_c",
               "emp_kappa", "prop_err")

# stream tags for SeedSequence keys
_TRAIN, _SAMPLE, _POISON, _ADA, _ROLES, _SUBSET, _PROBE = range(7)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class SimState:
    round: int
    params: np.ndarray
    prev_aggregate: np.ndarray | None = None


@dataclass
class RoundResult:
    state: SimState
    metrics: RoundMetrics
    outcome: AggregationOutcome
    updates: list[ClientUpdate]


@dataclass
class RunRecord:
    config: dict
    initial: RoundMetrics
    rounds: list[RoundMetrics]
    summary: dict
    wall_time: float
    metadata: dict = field(default_factory=dict)

    def csv_rows(self) -> list[RoundMetrics]:
        """Initial-model row plus every evaluated round."""
        return [self.initial, *[m for m in self.rounds if not math.isnan(m.ma)]]

    def csv_text(self) -> str:
        return metrics_csv(self.csv_rows())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(round(value, 10))
    return str(value)


def metrics_csv(rows, extra_columns: dict | None = None) -> str:
    """CSV text with the fixed column order; ``extra_columns`` are prepended per row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    lead = list(extra_columns or {})
    writer.writerow([*lead, *CSV_COLUMNS])
    for m in rows:
        writer.writerow([*(extra_columns or {}).values(), *(_fmt(getattr(m, c)) for c in CSV_COLUMNS)])
    return buf.getvalue()


def _subsample(data: LabeledDataset, count: int | None, seed: int, tag: int) -> LabeledDataset:
    if count is None or count >= len(data):
        return data
    return data.subset(np.sort(_rng(seed, _SUBSET, tag).permutation(len(data))[:count]))


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, int]:
    """(train, test, num_classes) for the configured dataset."""
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        full = gen_synthetic(s.num_classes, s.feat_dim, s.n_train + s.n_test, cfg.seed,
                             spread=s.spread, separation=s.separation)
        order = _rng(cfg.seed, _SUBSET, 99).permutation(len(full))
        return full.subset(np.sort(order[:s.n_train])), full.subset(np.sort(order[s.n_train:])), s.num_classes
    pairs = {split: find_idx_pair(cfg.data_dir, split) for split in ("train", "test")}
    for split, pair in pairs.items():
        if pair is None:
            raise FileNotFoundError(f"no {split} IDX files found in {cfg.data_dir}")
    train = _subsample(load_idx(*pairs["train"]), cfg.train_subset, cfg.seed, 0)
    test = _subsample(load_idx(*pairs["test"]), cfg.test_subset, cfg.seed, 1)
    return train, test, 10


class Simulation:
    """Static setup of one experiment: data shards, roles, model shape."""

    def __init__(self, cfg: ExperimentConfig, datasets=None):
        self.cfg = cfg
        train, test, num_classes = datasets or load_datasets(cfg)
        self.test = test
        self.attack = cfg.attack.spec()
        self.train_cfg: TrainConfig = cfg.train.spec()
        side = math.isqrt(train.feat_dim)
        self.trigger: TriggerSpec | None = None
        if cfg.n_clients > len(train):
            raise ConfigError(f"{cfg.n_clients} clients but only {len(train)} training samples")
        if side * side == train.feat_dim:
            self.trigger = cfg.trigger_spec(side)
        elif self.attack.poisons_data:
            raise ConfigError(f"trigger attacks need square images; feature dim is {train.feat_dim}")

        self.template = init_model(cfg.layer_sizes(train.feat_dim, num_classes), cfg.seed)
        plan = dirichlet_partition(train.labels, cfg.n_clients, cfg.beta, cfg.seed)
        self.shards = [train.subset(idx) for idx in plan.shards()]
        roles = _rng(cfg.seed, _ROLES).permutation(cfg.n_clients)
        self.malicious = frozenset(int(c) for c in roles[:cfg.n_malicious])
        self.colluders = sorted(self.malicious)
        self.poisoned: dict[int, LabeledDataset] = {}
        if self.attack.poisons_data:
            for j, cid in enumerate(self.colluders):
                part = j % 4 if self.attack.kind == "dba" else None
                self.poisoned[cid] = poison_dataset(self.shards[cid], self.trigger,
                                                    self.attack.poison_ratio,
                                                    _rng(cfg.seed, _POISON, cid).integers(2**63),
                                                    dba_part=part)
        self.rates = cfg.server_rates()
        self.last_layer = self.template.last_layer_slice()

    # -- per-round pieces -------------------------------------------------

    def participants(self, rnd: int) -> list[int]:
        k = self.cfg.clients_per_round
        if k is None or k >= self.cfg.n_clients:
            return list(range(self.cfg.n_clients))
        return sorted(int(c) for c in _rng(self.cfg.seed, _SAMPLE, rnd).choice(
            self.cfg.n_clients, size=k, replace=False))

    def train_client(self, model: MlpModel, cid: int, rnd: int, data: LabeledDataset | None = None):
        data = self.shards[cid] if data is None else data
        return local_train(model, data, self.train_cfg, _rng(self.cfg.seed, _TRAIN, cid, rnd))

    def _malicious_updates(self, model: MlpModel, state: SimState, mal: list[int],
                           benign: dict[int, np.ndarray], rnd: int) -> dict[int, np.ndarray]:
        kind = self.attack.kind
        if kind in ("ada_a", "ada_b"):
            # honest dry runs on the attackers' clean shards fix the update magnitude
            dry = {cid: self.train_client(model, cid, rnd) for cid in mal}
            magnitude = float(np.median([np.linalg.norm(v) for v in dry.values()]))
            if kind == "ada_a":
                pool = [benign[c] for c in sorted(benign)]
                return {cid: atk.ada_a(pool, magnitude, _rng(self.cfg.seed, _ADA, cid, rnd))
                        for cid in mal}
            if self.attack.ada_b_sign == "exact":
                # p over the benign updates is a fixed point: adding updates along p keeps p
                p = principal_sign(np.stack([benign[c] for c in sorted(benign)]))
            else:
                p = atk.colluder_sign_estimate([dry[c] for c in mal], state.prev_aggregate)
            return {cid: atk.ada_b(p, magnitude) for cid in mal}

        out = {}
        for cid in mal:
            delta = self.train_client(model, cid, rnd, self.poisoned.get(cid))
            if kind == "scaling":
                delta = atk.scaling_attack(delta, self.attack.scale_factor)
            elif kind == "pgd":
                radius = self.attack.pgd_radius_ratio * np.linalg.norm(state.params)
                delta = atk.pgd_project(state.params + delta, state.params, radius) - state.params
            elif kind == "neurotoxin":
                delta = atk.neurotoxin_mask(delta, state.prev_aggregate,
                                            self.attack.neurotoxin_bottom_frac)
            out[cid] = np.asarray(delta, dtype=np.float64)
        return out

    def collect_updates(self, state: SimState, benign_only: bool = False) -> list[ClientUpdate]:
        rnd = state.round + 1
        model = self.template.with_params(state.params)
        present = self.participants(rnd)
        benign = {c: self.train_client(model, c, rnd) for c in present if c not in self.malicious}
        deltas = dict(benign)
        mal = [c for c in present if c in self.malicious]
        if mal and not benign_only:
            deltas.update(self._malicious_updates(model, state, mal, benign, rnd))
        return [ClientUpdate(c, deltas[c], c in self.malicious) for c in sorted(deltas)]

    def run_round(self, state: SimState, benign_only: bool = False,
                  defense: str | None = None) -> RoundResult:
        """One round: local training, aggregation, global step, metrics."""
        cfg = self.cfg
        rnd = state.round + 1
        updates = self.collect_updates(state, benign_only)
        defense = defense or cfg.defense
        params = dict(cfg.defense_params)
        if defense == "multikrum" and "assumed_m" not in params:
            params["assumed_m"] = int(math.floor(cfg.attack.attack_ratio * len(updates) + 1e-9)) \
                if cfg.attack.kind != "none" else 0
        try:
            outcome = aggregate(defense, updates, state.params, params, self.last_layer)
        except ValueError as exc:
            log.warning("round %d: %s failed (%s); skipping the global step", rnd, defense, exc)
            outcome = AggregationOutcome(np.zeros_like(state.params), frozenset(), flagged=True,
                                         note=str(exc))

        alpha = self.rates[rnd - 1] if rnd - 1 < len(self.rates) else cfg.server_lr
        new_params = state.params + alpha * outcome.aggregated
        new_state = SimState(rnd, new_params, outcome.aggregated)

        truth = np.array([u.truth_is_malicious for u in updates])
        ids = np.array([u.client_id for u in updates])
        kappa = float("nan")
        if not truth.all():
            kappa = empirical_kappa(outcome.aggregated, np.stack([u.delta for u in updates]),
                                    truth, client_ids=ids)
        ma = ba = ra = float("nan")
        if rnd % cfg.eval_every == 0 or rnd == cfg.rounds:
            ma, ba, ra = self.evaluate(new_params)
        metrics = RoundMetrics(
            round=rnd, ma=ma, ba=ba, ra=ra,
            n_selected=len(outcome.selected),
            sel_tp=len(outcome.selected - self.malicious),
            sel_fp=len(outcome.selected & self.malicious),
            clip_c=outcome.clip_threshold if defense == "alignins" else None,
            emp_kappa=kappa, flagged=outcome.flagged,
        )
        return RoundResult(new_state, metrics, outcome, updates)

    def evaluate(self, params) -> tuple[float, float, float]:
        model = self.template.with_params(params)
        if self.trigger is None:
            # no square image to stamp a trigger on: main-task accuracy only
            pred, _ = predict(model, self.test.features)
            return float(100.0 * np.mean(pred == self.test.labels)), float("nan"), float("nan")
        return evaluate(model, self.test, self.trigger)

    def initial_state(self) -> SimState:
        return SimState(0, self.template.params.copy())

    def initial_metrics(self) -> RoundMetrics:
        ma, ba, ra = self.evaluate(self.template.params)
        return RoundMetrics(0, ma, ba, ra, n_selected=None, sel_tp=None, sel_fp=None,
                            clip_c=None, emp_kappa=None)

    def local_steps(self) -> int:
        """Largest number of SGD steps any client takes in one round."""
        biggest = max(len(s) for s in self.shards)
        return self.train_cfg.local_epochs * math.ceil(biggest / self.train_cfg.batch_size)

    def metadata(self) -> dict:
        tau = self.local_steps()
        return {
            "malicious_clients": sorted(self.malicious),
            "model_dim": self.template.dim,
            "layer_sizes": list(self.template.layer_sizes),
            "local_steps_tau": tau,
            "lr_within_analysis_condition": bool(tau == 0 or self.train_cfg.lr <= 1.0 / (2 * tau)),
            "attacker_sees_benign_update": self.attack.kind == "ada_a",
            "attacker_uses_exact_principal_sign": self.attack.kind == "ada_b"
                                                  and self.attack.ada_b_sign == "exact",
        }


def summarize(rounds: list[RoundMetrics], last: int = 10) -> dict:
    evaluated = [m for m in rounds if not math.isnan(m.ma)][-last:]
    if not evaluated:
        return {}
    return {key: float(np.mean([getattr(m, key) for m in evaluated])) for key in ("ma", "ba", "ra")}


def _write_outputs(record: RunRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(record.csv_text(), encoding="utf-8")
    meta = {"config": record.config, "summary": record.summary, "wall_time_s": record.wall_time,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **record.metadata}
    (out / "run.json").write_text(json.dumps(meta, indent=2, default=_json_default), encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))


def run_experiment(cfg: ExperimentConfig, out_dir=None, datasets=None) -> RunRecord:
    """Run all rounds; writes ``metrics.csv`` and ``run.json`` into ``out_dir`` if given."""
    if cfg.paired_run:
        return paired_run(cfg, out_dir, datasets)
    start = time.perf_counter()
    sim = Simulation(cfg, datasets)
    state = sim.initial_state()
    initial = sim.initial_metrics()
    rounds = []
    for _ in range(cfg.rounds):
        result = sim.run_round(state)
        state = result.state
        rounds.append(result.metrics)
        log.info("round %d ma=%.2f ba=%.2f ra=%.2f |S|=%d", result.metrics.round,
                 result.metrics.ma, result.metrics.ba, result.metrics.ra, result.metrics.n_selected)
    record = RunRecord(cfg.model_dump(), initial, rounds, summarize(rounds),
                       time.perf_counter() - start, sim.metadata())
    if out_dir is not None:
        _write_outputs(record, out_dir)
    return record


def paired_run(cfg: ExperimentConfig, out_dir=None, datasets=None) -> RunRecord:
    """Attacked+defended trajectory next to benign-only FedAvg from the same start.

    Each round records ``||theta_t - theta*_t||`` as ``prop_err`` and, in the
    metadata, the propagation-error bound evaluated with the largest empirical
    kappa seen so far and the latest variance estimate.
    """
    start = time.perf_counter()
    sim = Simulation(cfg, datasets)
    state = sim.initial_state()
    ref = sim.initial_state()
    initial = sim.initial_metrics()
    initial.prop_err = 0.0
    rounds, bounds = [], []
    kappa_max, nu_bar = 0.0, 0.0
    benign = [sim.shards[c] for c in range(cfg.n_clients) if c not in sim.malicious]

    def variance_at(params, tag):
        return estimate_nu_zeta(benign, sim.template.with_params(params), cfg.estimate_probes,
                                cfg.train.batch_size, seed=cfg.seed + tag).nu_bar

    if cfg.estimate_every and len(benign) >= 2:
        # probe once at the shared starting point so round 1 has a variance term too
        nu_bar = variance_at(state.params, 0)
    for _ in range(cfg.rounds):
        result = sim.run_round(state)
        ref = sim.run_round(ref, benign_only=True, defense="fedavg").state
        state = result.state
        m = result.metrics
        m.prop_err = float(np.linalg.norm(state.params - ref.params))
        if not math.isnan(m.emp_kappa):
            kappa_max = max(kappa_max, m.emp_kappa)
        if cfg.estimate_every and len(benign) >= 2 and m.round % cfg.estimate_every == 0:
            nu_bar = max(nu_bar, variance_at(state.params, m.round))
        bounds.append(propagation_error_bound(m.round, sim.rates, cfg.mu, kappa_max, nu_bar))
        rounds.append(m)
    meta = sim.metadata()
    meta.update(prop_error_bound=bounds, kappa_max=kappa_max, nu_bar=nu_bar)
    record = RunRecord(cfg.model_dump(), initial, rounds, summarize(rounds),
                       time.perf_counter() - start, meta)
    if out_dir is not None:
        _write_outputs(record, out_dir)
    return record
