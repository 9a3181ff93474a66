"""Flat key-value pipeline configuration.

One `section.key = value` pair per line, full-line # comments. Every value
has a default except the three seeds, which must be stated explicitly so a
run is reproducible from its config file alone. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .encoder import EMBED_DIM, INIT_TAU, MAX_LEN, OUT_DIM, VOCAB_SIZE
from .engine import MiningConfig
from .logsim import WorldSpec
from .trainer import TrainConfig

MINING_SOURCES = ("search", "reformulation", "recommendation")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin} line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{origin} line {line_no}: empty key")
        if key in out:
            raise ConfigError(f"{origin} line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config_file(path: str | Path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), origin=str(path))


def apply_overrides(mapping: dict[str, str], overrides: Sequence[str]) -> dict[str, str]:
    """Merge `key=value` strings over a parsed config, last one winning."""
    merged = dict(mapping)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        merged[key] = value.strip()
    return merged


class _Reader:
    """Typed accessors over the raw mapping, tracking which keys were used."""

    def __init__(self, mapping: Mapping[str, str]):
        self.mapping = mapping
        self.used: set[str] = set()

    def _raw(self, key: str) -> str | None:
        if key in self.mapping:
            self.used.add(key)
            return self.mapping[key]
        return None

    def require_int(self, key: str) -> int:
        raw = self._raw(key)
        if raw is None:
            raise ConfigError(f"missing required config key {key!r}")
        return self._to_int(key, raw)

    def get_str(self, key: str, default: str) -> str:
        raw = self._raw(key)
        return default if raw is None else raw

    def get_int(self, key: str, default: int) -> int:
        raw = self._raw(key)
        return default if raw is None else self._to_int(key, raw)

    def get_float(self, key: str, default: float) -> float:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self._raw(key)
        if raw is None:
            return default
        token = raw.lower()
        if token in ("true", "yes", "1", "on"):
            return True
        if token in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")

    def get_int_list(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated integer list, got {raw!r}") from None

    def get_str_list(self, key: str, default: tuple[str, ...]) -> tuple[str, ...]:
        raw = self._raw(key)
        if raw is None:
            return default
        return tuple(p.strip() for p in raw.split(",") if p.strip())

    @staticmethod
    def _to_int(key: str, raw: str) -> int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None

    def reject_unknown(self) -> None:
        unknown = sorted(set(self.mapping) - self.used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


@dataclass
class PipelineConfig:
    world: WorldSpec
    mining: MiningConfig
    trainer: TrainConfig
    mining_seed: int
    mining_sources: tuple[str, ...] = MINING_SOURCES
    vocab_size: int = VOCAB_SIZE
    max_len: int = MAX_LEN
    embed_dim: int = EMBED_DIM
    out_dim: int = OUT_DIM
    init_tau: float = INIT_TAU
    recall_ks: tuple[int, ...] = (50, 100)
    ndcg_k: int = 4
    prompt_records: int = 4
    out_dir: Path = Path("out")
    paths: dict[str, Path] = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.paths[name]

    def validate(self) -> None:
        self.world.validate()
        self.mining.validate()
        self.trainer.validate()
        for source in self.mining_sources:
            if source not in MINING_SOURCES:
                raise ConfigError(
                    f"unknown mining source {source!r}; expected a subset of {MINING_SOURCES}"
                )
        if not self.mining_sources:
            raise ConfigError("mining.sources must name at least one source")
        for k in self.recall_ks:
            if k < 1:
                raise ConfigError(f"eval.recall_ks entries must be >= 1, got {k}")
        if not self.recall_ks:
            raise ConfigError("eval.recall_ks must name at least one K")
        if self.ndcg_k < 1:
            raise ConfigError(f"eval.ndcg_k must be >= 1, got {self.ndcg_k}")
        if self.prompt_records < 1:
            raise ConfigError(f"prompts.records_per_query must be >= 1, got {self.prompt_records}")
        for name, value in (
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.max_len", self.max_len),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.out_dim", self.out_dim),
        ):
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.init_tau <= 0:
            raise ConfigError(f"encoder.init_tau must be > 0, got {self.init_tau}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "PipelineConfig":
        r = _Reader(mapping)
        world = WorldSpec(
            seed=r.require_int("world.seed"),
            n_topics=r.get_int("world.n_topics", 20),
            intents_per_topic=r.get_int("world.intents_per_topic", 3),
            docs_per_intent=r.get_int("world.docs_per_intent", 40),
            n_users=r.get_int("world.n_users", 500),
            sessions_per_user=r.get_int("world.sessions_per_user", 10),
            reformulation_prob=r.get_float("world.reformulation_prob", 0.3),
            rec_consume_rate=r.get_int("world.rec_consume_rate", 5),
            exposure_bias=r.get_bool("world.exposure_bias", True),
            holdout_sessions=r.get_int("world.holdout_sessions", 2),
            popular_per_intent=r.get_int("world.popular_per_intent", 8),
            exposed_per_query=r.get_int("world.exposed_per_query", 12),
            unexposed_per_query=r.get_int("world.unexposed_per_query", 8),
            prerank_per_query=r.get_int("world.prerank_per_query", 8),
            clicks_per_session=r.get_int("world.clicks_per_session", 2),
            reform_exposed=r.get_int("world.reform_exposed", 6),
            reform_consumed=r.get_int("world.reform_consumed", 2),
            topic_affinity=r.get_float("world.topic_affinity", 0.6),
            away_dominant_prob=r.get_float("world.away_dominant_prob", 0.7),
            rec_interest_prob=r.get_float("world.rec_interest_prob", 0.8),
            wk_records_per_intent=r.get_int("world.wk_records_per_intent", 2),
            session_gap_seconds=r.get_int("world.session_gap_seconds", 86400),
        )
        mining = MiningConfig(
            alpha=r.get_float("mining.alpha", 0.6),
            query_sim_threshold=r.get_float("mining.query_sim_threshold", 0.6),
            reform_window_seconds=r.get_int("mining.reform_window_seconds", 90),
            rec_window_seconds=r.get_int("mining.rec_window_seconds", 3600),
            rec_cap_per_user=r.get_int("mining.rec_cap_per_user", 100),
            neg_per_group=r.get_int("mining.neg_per_group", 8),
            neg_source_ratio=(
                r.get_float("mining.neg_ratio_unexposed", 0.5),
                r.get_float("mining.neg_ratio_prerank", 0.5),
            ),
        )
        mining_seed = r.require_int("mining.seed")
        mining_sources = r.get_str_list("mining.sources", MINING_SOURCES)
        trainer = TrainConfig(
            loss=r.get_str("trainer.loss", "h_infonce"),
            epochs=r.get_int("trainer.epochs", 1),
            batch_groups=r.get_int("trainer.batch_groups", 8),
            lr=r.get_float("trainer.lr", 2e-5),
            weight_decay=r.get_float("trainer.weight_decay", 1e-4),
            beta1=r.get_float("trainer.beta1", 0.9),
            beta2=r.get_float("trainer.beta2", 0.999),
            eps=r.get_float("trainer.eps", 1e-8),
            max_group_docs=r.get_int("trainer.max_group_docs", 32),
            seed=r.require_int("trainer.seed"),
        )
        out_dir = Path(r.get_str("paths.out_dir", "out"))
        default_paths = {
            "corpus": "corpus.jsonl",
            "train_log": "train_log.jsonl",
            "eval_log": "eval_log.jsonl",
            "intent_map": "intent_map.jsonl",
            "annotated": "annotated.jsonl",
            "groups": "groups.jsonl",
            "checkpoint": "encoder.ckpt",
            "curve": "curve.csv",
            "report": "report.json",
            "prompts_dir": "prompts",
            "knowledge_dir": "knowledge",
        }
        paths = {
            name: Path(r.get_str(f"paths.{name}", str(out_dir / default)))
            for name, default in default_paths.items()
        }
        cfg = cls(
            world=world,
            mining=mining,
            trainer=trainer,
            mining_seed=mining_seed,
            mining_sources=mining_sources,
            vocab_size=r.get_int("encoder.vocab_size", VOCAB_SIZE),
            max_len=r.get_int("encoder.max_len", MAX_LEN),
            embed_dim=r.get_int("encoder.embed_dim", EMBED_DIM),
            out_dim=r.get_int("encoder.out_dim", OUT_DIM),
            init_tau=r.get_float("encoder.init_tau", INIT_TAU),
            recall_ks=r.get_int_list("eval.recall_ks", (50, 100)),
            ndcg_k=r.get_int("eval.ndcg_k", 4),
            prompt_records=r.get_int("prompts.records_per_query", 4),
            out_dir=out_dir,
            paths=paths,
        )
        r.reject_unknown()
        cfg.validate()
        return cfg


def load_pipeline_config(
    config_path: str | Path | None, overrides: Sequence[str] = ()
) -> PipelineConfig:
    mapping = parse_config_file(config_path) if config_path is not None else {}
    mapping = apply_overrides(mapping, overrides)
    return PipelineConfig.from_mapping(mapping)
