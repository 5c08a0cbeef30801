"""End-to-end experiment runner and the named presets.

An experiment builds one synthetic scenario, trains token embeddings, fits a
feature layout, featurizes every client window and test set once, and then
runs several *variants* (federated, local, different budgets, attacks,
defenses, feature groups) over the same data.  Each variant writes its own
``metrics.csv`` with rows ``round, client, test_set, metric, value``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_rng
from .active import OracleAnalyst, active_round_hook
from .embed import (
    NGRAM_HASHED,
    EmbeddingModel,
    Vocabulary,
    build_vocab_federated,
    corpus_client,
    decayed_lr,
    federated_embed_train,
    save_embedding,
    token_frequencies,
    train_cbow_epoch,
)
from .errors import ConfigError
from .featurize import GROUPS, FeatureLayout, Featurizer, fit_layout, group_mask, lexical_features
from .fed import ClientState, LabeledSet, Server, run_training
from .logmodel import Label, LogRecord
from .metrics import fpr_at_recall, pr_auc
from .nn import TrainConfig, bce, init_weights, predict, save_checkpoint
from .synth import FamilyPlacement, ScenarioConfig, ScenarioData, assemble_scenario
from .threat import AttackConfig, DefensePolicy
from .tokenizer import TokenSentence, corpus_from_records

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "client", "test_set", "metric", "value")


# --- configuration ---------------------------------------------------------------


@dataclass
class EmbedSettings:
    mode: str = "whole_token"
    d: int = 32
    rounds: int = 2
    min_count: int = 2
    bucket_count: int = 2**20
    window: int = 5
    lr: float = 0.025
    neg_samples: int = 5
    max_records_per_client: int = 3000  # corpus cap per client, earliest windows first


@dataclass
class VariantConfig:
    """One training run over the shared data.

    ``mode`` is ``federated`` or ``local`` (each client alone).  ``embedding``
    selects ``federated`` or ``centralized`` token embeddings, or the
    ``lexical`` baseline features.
    """

    name: str
    mode: str = "federated"
    embedding: str = "federated"
    group: str = "All"
    budget: int = 0
    attack: bool = False
    defense: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("federated", "local"):
            raise ConfigError(f"variant {self.name}: unknown mode {self.mode!r}")
        if self.embedding not in ("federated", "centralized", "lexical"):
            raise ConfigError(f"variant {self.name}: unknown embedding {self.embedding!r}")
        if self.group not in GROUPS:
            raise ConfigError(f"variant {self.name}: unknown group {self.group!r}")
        DefensePolicy(**self.defense)


@dataclass
class AttackSettings:
    kind: str = "weight_boost"
    target_pattern: str = "mirai"
    poisoners: list[int] = field(default_factory=list)
    start_round: int = 1
    boost_factor: float | None = None  # None: clients / poisoners
    local_epochs: int | None = None


@dataclass
class ExperimentConfig:
    name: str
    scenario: ScenarioConfig
    variants: list[VariantConfig]
    eval_sets: list[str]
    rounds: int
    train: TrainConfig = field(default_factory=TrainConfig)
    embed: EmbedSettings = field(default_factory=EmbedSettings)
    port_slots: int = 100
    attack: AttackSettings | None = None
    helpers: list[int] = field(default_factory=list)
    anomaly: dict = field(default_factory=lambda: {"k": 3, "psi": 256, "n_trees": 100})
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.rounds > self.scenario.windows:
            raise ConfigError("rounds exceed the scenario's windows")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")
        known = {f.family for f in self.scenario.families} | {"all"}
        for s in self.eval_sets:
            if s not in known:
                raise ConfigError(f"eval set {s!r} is not a scenario family")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = copy.deepcopy(obj)
        scen = obj.pop("scenario")
        scen["families"] = [FamilyPlacement(**f) for f in scen["families"]]
        return cls(
            scenario=ScenarioConfig(**scen),
            variants=[VariantConfig(**v) for v in obj.pop("variants")],
            train=TrainConfig(**obj.pop("train", {})),
            embed=EmbedSettings(**obj.pop("embed", {})),
            attack=AttackSettings(**obj["attack"]) if obj.get("attack") else None,
            **{k: v for k, v in obj.items() if k != "attack"},
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _families(*specs) -> list[dict]:
    return [dict(zip(("family", "clients", "events_per_window", "labeled_clients"), s)) for s in specs]


def preset(name: str, seed: int = 0) -> dict:
    """Configuration dict of a named preset (editable before running)."""
    if name == "transfer":
        return {
            "name": name,
            "seed": seed,
            "rounds": 20,
            "scenario": {
                "n_clients": 2,
                "windows": 20,
                "benign_per_window": 150,
                "benign_test": 3000,
                "families": _families(("mirai", [0], 12, None), ("exfil", [1], 12, None)),
                "seed": seed,
            },
            "eval_sets": ["mirai", "exfil"],
            "variants": [{"name": "federated"}, {"name": "local", "mode": "local"}],
        }
    if name == "active-budget":
        return {
            "name": name,
            "seed": seed,
            "rounds": 20,
            "scenario": {
                "n_clients": 2,
                "windows": 20,
                "benign_per_window": 100,
                "unlabeled_benign_per_window": 300,
                "benign_test": 3000,
                "families": _families(("gafgyt", [0, 1], 8, None), ("exfil", [0, 1], 8, [])),
                "seed": seed,
            },
            "eval_sets": ["exfil"],
            "anomaly": {"k": 3, "psi": 128, "n_trees": 50},
            "variants": [{"name": f"budget_{b}", "budget": b} for b in (0, 50, 200)],
        }
    if name == "poison-recover":
        poisoners, helpers = list(range(5)), list(range(5, 10))
        others = list(range(10, 30))
        return {
            "name": name,
            "seed": seed,
            "rounds": 48,
            "scenario": {
                "n_clients": 30,
                "windows": 48,
                "benign_per_window": 40,
                "benign_test": 8000,
                "families": _families(
                    ("mirai", poisoners + helpers, 8, None),
                    ("exfil", others[0::3], 8, None),
                    ("beacon", others[1::3], 8, None),
                    ("gafgyt", others[2::3], 8, None),
                ),
                "seed": seed,
            },
            "embed": {"max_records_per_client": 500},
            "eval_sets": ["mirai"],
            "attack": {"kind": "weight_boost", "target_pattern": "mirai", "poisoners": poisoners, "start_round": 20, "local_epochs": 50},
            "helpers": helpers,
            "variants": [
                {"name": "clean"},
                {"name": "no_defense", "attack": True},
                {"name": "dtrust", "attack": True, "defense": {"dtrust_enabled": True, "server_threshold": 0.3}},
                {"name": "clipping", "attack": True, "defense": {"clipping_bound": 0.1}},
            ],
        }
    if name == "embed-parity":
        return {
            "name": name,
            "seed": seed,
            "rounds": 20,
            "scenario": {
                "n_clients": 3,
                "windows": 20,
                "benign_per_window": 100,
                "benign_test": 3000,
                "families": _families(("mirai", [0], 8, None), ("exfil", [1], 8, None), ("dem", [2], 8, None)),
                "seed": seed,
            },
            "eval_sets": ["all"],
            "variants": [
                {"name": "federated_embeddings", "embedding": "federated"},
                {"name": "centralized_embeddings", "embedding": "centralized"},
                {"name": "lexical_baseline", "embedding": "lexical"},
            ],
        }
    if name == "feature-groups":
        return {
            "name": name,
            "seed": seed,
            "rounds": 20,
            "scenario": {
                "n_clients": 2,
                "windows": 20,
                "benign_per_window": 100,
                "benign_test": 3000,
                "families": _families(("thinkphp", [0, 1], 6, None), ("beacon", [0, 1], 6, None)),
                "seed": seed,
            },
            "eval_sets": ["all"],
            "variants": [{"name": g, "group": g} for g in GROUPS],
        }
    if name == "scaling":
        clients = list(range(30))
        return {
            "name": name,
            "seed": seed,
            "rounds": 24,
            "scenario": {
                "n_clients": 30,
                "windows": 24,
                "benign_per_window": 40,
                "benign_test": 3000,
                "families": _families(("mirai", clients, 2, None), ("exfil", clients, 2, None), ("dem", clients, 2, None)),
                "seed": seed,
            },
            "embed": {"max_records_per_client": 400},
            "eval_sets": ["all", "mirai", "exfil", "dem"],
            "variants": [{"name": "federated"}, {"name": "local", "mode": "local"}],
        }
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("transfer", "active-budget", "poison-recover", "embed-parity", "feature-groups", "scaling")


# --- shared context ----------------------------------------------------------------


@dataclass
class EvalPool:
    """Featurized test records and, per eval set, its row indices and labels."""

    X: np.ndarray
    sets: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class Context:
    config: ExperimentConfig
    scenario: ScenarioData
    layout: FeatureLayout | None = None
    embeddings: dict[str, EmbeddingModel] = field(default_factory=dict)
    features: dict[str, tuple[list[list[LabeledSet]], list[LabeledSet | None], dict[str, tuple]]] = field(
        default_factory=dict
    )


def _client_corpus(client_windows: Sequence[Sequence[LogRecord]], cap: int) -> list[TokenSentence]:
    recs: list[LogRecord] = []
    for w in client_windows:
        if len(recs) >= cap:
            break
        recs.extend(w[: cap - len(recs)])
    return corpus_from_records(recs)


def train_embeddings(
    corpora: Sequence[Sequence[TokenSentence]], settings: EmbedSettings, seed: int, centralized: bool = False
) -> EmbeddingModel:
    """Federated sequential (default) or pooled CBOW training over client corpora."""
    if settings.mode == NGRAM_HASHED:
        vocab = Vocabulary.hashed(settings.bucket_count)
    else:
        vocab = build_vocab_federated([token_frequencies(c) for c in corpora], settings.min_count)
    model0 = EmbeddingModel.create(
        vocab,
        d=settings.d,
        window=settings.window,
        neg_samples=settings.neg_samples,
        lr=settings.lr,
        seed=seed,
    )
    if not centralized:
        clients = [corpus_client(c, seed + 7919 * (i + 1)) for i, c in enumerate(corpora)]
        return federated_embed_train(clients, settings.rounds, model0)
    pooled = [s for c in corpora for s in c]
    order = derive_rng(seed, "central-corpus").permutation(len(pooled))
    pooled = [pooled[i] for i in order]
    model = model0
    for r in range(1, settings.rounds + 1):
        model = train_cbow_epoch(model, pooled, seed + 104_729 * r, lr=decayed_lr(model0.lr, r, settings.rounds))
    return model


def _labels(records: Sequence[LogRecord]) -> np.ndarray:
    m = {Label.MALICIOUS: 1, Label.BENIGN: 0, Label.UNLABELED: -1}
    return np.array([m[r.label] for r in records], dtype=np.int8)


def _labeled_set(X: np.ndarray, records: Sequence[LogRecord]) -> LabeledSet:
    return LabeledSet(X, _labels(records), [r.uid for r in records], [r.family for r in records])


def build_context(config: ExperimentConfig) -> Context:
    scenario = assemble_scenario(config.scenario)
    return Context(config, scenario)


def _featurizer_for(ctx: Context, embedding: str):
    """Row featurizer for an embedding variant (``lexical`` ignores the layout)."""
    cfg = ctx.config
    if embedding == "lexical":
        return lambda recs: np.asarray([np.log1p(lexical_features(r)) for r in recs], dtype=np.float32).reshape(
            len(recs), -1
        )
    if embedding not in ctx.embeddings:
        cap = cfg.embed.max_records_per_client
        corpora = [_client_corpus(cd.windows, cap) for cd in ctx.scenario.clients]
        ctx.embeddings[embedding] = train_embeddings(
            corpora, cfg.embed, cfg.seed, centralized=embedding == "centralized"
        )
    model = ctx.embeddings[embedding]
    if ctx.layout is None:
        train_records = [r for cd in ctx.scenario.clients for w in cd.windows for r in w]
        ctx.layout = fit_layout(train_records, model, cfg.port_slots)
    return Featurizer(ctx.layout, model).transform


def features(ctx: Context, embedding: str):
    """Featurized client windows, trust sets and test sets (cached per embedding)."""
    if embedding in ctx.features:
        return ctx.features[embedding]
    fx = _featurizer_for(ctx, embedding)
    windows = [[_labeled_set(fx(w), w) for w in cd.windows] for cd in ctx.scenario.clients]
    trust = [_labeled_set(fx(cd.trust), cd.trust) if cd.trust else None for cd in ctx.scenario.clients]
    # every test record is featurized once; each eval set is a row selection
    pool = ctx.scenario.test_set(None)
    row = {r.uid: i for i, r in enumerate(pool)}
    y_pool = np.array([r.label is Label.MALICIOUS for r in pool], dtype=np.int8)
    sets = {}
    for name in ctx.config.eval_sets:
        idx = np.array([row[r.uid] for r in ctx.scenario.test_set(None if name == "all" else name)])
        sets[name] = (idx, y_pool[idx])
    tests = EvalPool(fx(pool).astype(np.float64), sets)
    ctx.features[embedding] = (windows, trust, tests)
    return ctx.features[embedding]


# --- variants ---------------------------------------------------------------------


def _mask(X: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return X if mask is None else X * mask.astype(X.dtype)


def _clients(ctx: Context, variant: VariantConfig, windows, trust, mask) -> list[ClientState]:
    cfg = ctx.config
    attack = cfg.attack if variant.attack else None
    poisoners = set(attack.poisoners) if attack else set()
    helpers = set(cfg.helpers)
    out = []
    for i, cd in enumerate(ctx.scenario.clients):
        ws = [LabeledSet(_mask(w.X, mask), w.y, w.record_ids, w.families) for w in windows[i]]
        ts = trust[i]
        if ts is not None:
            ts = LabeledSet(_mask(ts.X, mask), ts.y, ts.record_ids, ts.families)
        role = "poisoner" if i in poisoners else "helper" if i in helpers else "benign"
        ac = None
        if i in poisoners:
            factor = attack.boost_factor or len(ctx.scenario.clients) / len(poisoners)
            ac = AttackConfig(
                attack.kind,
                attack.target_pattern,
                factor if attack.kind == "weight_boost" else 1.0,
                attack.start_round,
                len(poisoners),
                attack.local_epochs,
            )
        out.append(ClientState(cd.client_id, ws, ts, cd.trust_legit, role, ac))
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def _eval_rows(weights, tests: EvalPool, t: int, client: str, mask) -> list[tuple]:
    pooled = predict(weights, _mask(tests.X, mask))
    rows = []
    for name, (idx, y) in tests.sets.items():
        scores = pooled[idx]
        rows.append((t, client, name, "pr_auc", _fmt(pr_auc(scores, y))))
        rows.append((t, client, name, "fpr_at_recall_0.9", _fmt(fpr_at_recall(scores, y, 0.9))))
        rows.append((t, client, name, "loss", _fmt(bce(scores, y))))
    return rows


def write_metrics(rows: Sequence[tuple], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{**r, "round": int(r["round"]), "value": float(r["value"])} for r in csv.DictReader(fh)]


def run_variant(ctx: Context, variant: VariantConfig, out_dir: Path) -> dict:
    cfg = ctx.config
    windows, trust, tests = features(ctx, variant.embedding)
    dim = windows[0][0].dim
    mask = None
    if variant.group != "All":
        if variant.embedding == "lexical":
            raise ConfigError("feature groups need the embedded layout")
        mask = group_mask(ctx.layout, variant.group)
    clients = _clients(ctx, variant, windows, trust, mask)
    w0 = init_weights(dim, cfg.train)
    defense = DefensePolicy(**variant.defense)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"variant": asdict(variant)}

    if variant.mode == "local":
        rows = []
        for c in clients:
            server = Server(w0)
            rows += run_training(
                server,
                [c],
                cfg.rounds,
                cfg.train,
                seed=cfg.seed,
                evaluate=lambda t, p, s=server, cid=c.client_id: _eval_rows(s.weights(p), tests, t, cid, mask),
            )
            save_checkpoint(out_dir / f"{c.client_id}.ckpt", server.weights(), cfg.train)
        write_metrics(rows, out_dir / "metrics.csv")
        summary["final"] = _final(rows, cfg.rounds)
        return summary

    server = Server(w0, lookback=defense.lookback)
    oracle = OracleAnalyst(ctx.scenario.truth)
    audit: list[tuple] = []
    per_round: list[dict] = []

    def evaluate(t, params):
        weights = server.weights(params)
        return _eval_rows(weights, tests, t, "global", mask)

    def after_round(c, weights, t):
        audit.extend(
            active_round_hook(c, weights, t, variant.budget, oracle, seed=cfg.seed, **cfg.anomaly)
        )

    from .fed import run_round

    rows = []
    for t in range(1, cfg.rounds + 1):
        res = run_round(server, clients, t, cfg.train, defense, cfg.seed)
        rows += evaluate(t, res.global_params)
        per_round.append(
            {
                "round": t,
                "reports": [r.client_id for r in res.reports],
                "flagged": [c for inv in res.investigations for c in inv.flagged],
                "removed": sorted(server.ledger.removed_clients),
            }
        )
        if variant.budget:
            weights = server.weights()
            for c in clients:
                if c.client_id not in server.ledger.removed_clients:
                    after_round(c, weights, t)
    write_metrics(rows, out_dir / "metrics.csv")
    save_checkpoint(out_dir / "global.ckpt", server.weights(), cfg.train)
    if server.incidents:
        idir = out_dir / "incidents"
        idir.mkdir(exist_ok=True)
        for k, inv in enumerate(server.incidents):
            (idir / f"incident_{k:03d}_round{inv.round:03d}.json").write_text(inv.dumps(), encoding="utf-8")
    if variant.budget:
        with open(out_dir / "audit.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("round", "client", "record_id", "selector", "label"))
            w.writerows(audit)
        summary["revealed_malicious"] = sum(1 for a in audit if a[4] == Label.MALICIOUS.value)
        summary["investigated"] = len(audit)
    summary["final"] = _final(rows, cfg.rounds)
    summary["rounds"] = per_round
    summary["removed_clients"] = sorted(server.ledger.removed_clients)
    summary["roles"] = {c.client_id: c.role for c in clients}
    if cfg.attack is not None and variant.attack:
        summary["detection"] = detection_summary(per_round, summary["roles"], cfg.attack.start_round)
    return summary


def detection_summary(per_round: list[dict], roles: dict[str, str], start_round: int) -> dict:
    """When the trust checks first fired after the attack and when the last poisoner was flagged."""
    poisoners = {c for c, r in roles.items() if r == "poisoner"}
    first_report = next((p["round"] for p in per_round if p["round"] >= start_round and p["reports"]), None)
    flagged_at: dict[str, int] = {}
    for p in per_round:
        for c in p["flagged"]:
            flagged_at.setdefault(c, p["round"])
    all_flagged = poisoners and poisoners <= set(flagged_at)
    last = max(flagged_at[c] for c in poisoners) if all_flagged else None
    return {
        "first_report_round": first_report,
        "flagged_at": flagged_at,
        "poisoners_flagged": sorted(poisoners & set(flagged_at)),
        "benign_flagged": sorted(set(flagged_at) - poisoners),
        "all_poisoners_flagged_round": last,
        "latency": (last - first_report) if last is not None and first_report is not None else None,
    }


def _final(rows: Sequence[tuple], t: int) -> dict:
    out: dict = {}
    for r in rows:
        if r[0] == t:
            out.setdefault(r[1], {}).setdefault(r[2], {})[r[3]] = float(r[4])
    return out


def run_experiment(config: ExperimentConfig, out_dir: str | Path, variants: Sequence[str] | None = None) -> dict:
    """Run every (or the selected) variant; writes per-variant folders and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = build_context(config)
    chosen = [v for v in config.variants if variants is None or v.name in variants]
    if variants is not None and len(chosen) != len(set(variants)):
        raise ConfigError(f"unknown variant in {variants}")
    summaries = {}
    for v in chosen:
        log.info("%s: running variant %s", config.name, v.name)
        summaries[v.name] = run_variant(ctx, v, out / v.name)
        (out / v.name / "summary.json").write_text(json.dumps(summaries[v.name], indent=1, sort_keys=True))
    if ctx.layout is not None:
        ctx.layout.save(out / "layout.json")
    for name, model in ctx.embeddings.items():
        save_embedding(model, out / f"embedding_{name}.bin")
    manifest = {
        "experiment": config.name,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_sha256": config.sha256(),
        "scenario": ctx.scenario.manifest,
        "variants": [v.name for v in chosen],
        "notes": {
            "benign_negatives": "labeled benign background comes from scenario ground truth",
            "balanced_batches": config.train.balance,
            "layout_fit": "categorical vocabularies fitted on the union of client training windows",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return summaries
