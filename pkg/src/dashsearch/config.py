"""Run configuration: a flat INI file with section headers, validated
strictly (unknown sections or keys are rejected)."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

from .corpus import CorpusSpec, RecallTaskSpec
from .model import ModelSpec
from .search import SearchConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    heldout_batches: int = 16
    recall_queries: int = 64
    recall_pairs: int = 3
    recall_gap: int = 24


@dataclass
class RunConfig:
    model: ModelSpec
    corpus: CorpusSpec
    corpus_tokens: int
    teacher: TrainConfig
    align: TrainConfig
    search: SearchConfig
    distill: TrainConfig
    distill_tau: float
    eval: EvalConfig
    sweep_lambdas: tuple[float, ...]
    sweep_seeds: tuple[int, ...]
    seed: int
    out_dir: str

    def reseeded(self, seed: int) -> "RunConfig":
        """Re-derive all stage seeds from one master seed."""
        return dataclasses.replace(
            self,
            seed=seed,
            teacher=dataclasses.replace(self.teacher, seed=seed),
            align=dataclasses.replace(self.align, seed=seed + 1),
            search=dataclasses.replace(self.search, seed=seed + 2),
            distill=dataclasses.replace(self.distill, seed=seed + 3),
        )


def default_config() -> RunConfig:
    spec = ModelSpec()
    cfg = RunConfig(
        model=spec,
        corpus=CorpusSpec(vocab=spec.vocab),
        corpus_tokens=400_000,
        teacher=TrainConfig(
            stage="teacher", steps=1500, batch=8, seq_len=128,
            lr_main=1e-3, weight_decay=0.01, schedule="cosine",
        ),
        align=TrainConfig(
            stage="align", steps=600, batch=4, seq_len=128,
            lr_main=1e-3, lr_attn_op=1e-3, weight_decay=0.01, schedule="cosine",
        ),
        search=SearchConfig(),
        distill=TrainConfig(
            stage="distill", steps=300, batch=4, seq_len=128,
            lr_main=2e-4, lr_attn_op=1e-3, weight_decay=0.01, schedule="constant",
        ),
        distill_tau=1.0,
        eval=EvalConfig(),
        sweep_lambdas=(0.001, 0.005, 0.02, 0.1),
        sweep_seeds=(0, 1, 2),
        seed=0,
        out_dir="out",
    )
    return cfg.reseeded(cfg.seed)


# section -> key -> parser; the schema doubles as the validator.
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.replace(",", " ").split())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


_SCHEMA: dict[str, dict[str, object]] = {
    "model": {
        "n_layers": int, "d_model": int, "n_heads": int, "vocab": int,
        "max_seq": int, "window": int, "ffn_mult": int,
    },
    "corpus": {
        "n_tokens": int, "n_markov": int, "n_keys": int, "n_values": int,
        "recall_fraction": float, "segment_len": int, "pairs_per_segment": int,
        "recall_gap": int, "table_seed": int, "table_sharpness": float,
    },
    "teacher": {
        "steps": int, "batch": int, "seq_len": int, "lr_main": float,
        "weight_decay": float, "schedule": str,
    },
    "align": {
        "steps": int, "batch": int, "seq_len": int, "lr_main": float,
        "lr_attn_op": float, "weight_decay": float, "schedule": str,
    },
    "search": {
        "lambda": float, "tau": float, "steps": int, "grad_accum": int,
        "micro_batch": int, "seq_len": int, "lr_alpha": float,
        "t_arch_init": float, "t_arch_final": float, "anneal_steps": int,
        "anneal": _parse_bool, "space": str,
    },
    "distill": {
        "steps": int, "batch": int, "seq_len": int, "lr_main": float,
        "lr_attn_op": float, "weight_decay": float, "schedule": str, "tau": float,
    },
    "eval": {
        "heldout_batches": int, "recall_queries": int, "recall_pairs": int,
        "recall_gap": int,
    },
    "sweep": {"lambdas": _float_list, "seeds": _int_list},
    "run": {"seed": int, "out_dir": str},
}


def load_config(path) -> RunConfig:
    """Parse and validate an INI config, filling gaps from defaults."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[section][key] = _SCHEMA[section][key](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    base = default_config()
    model_kw = values.get("model", {})
    spec = dataclasses.replace(base.model, **model_kw)

    corpus_kw = dict(values.get("corpus", {}))
    corpus_tokens = corpus_kw.pop("n_tokens", base.corpus_tokens)
    cspec = dataclasses.replace(base.corpus, vocab=spec.vocab, **corpus_kw)

    def train_cfg(section: str, template: TrainConfig) -> TrainConfig:
        kw = dict(values.get(section, {}))
        kw.pop("tau", None)
        return dataclasses.replace(template, **kw)

    search_kw = dict(values.get("search", {}))
    if "lambda" in search_kw:
        search_kw["lam"] = search_kw.pop("lambda")
    search = dataclasses.replace(base.search, **search_kw)

    sweep_kw = values.get("sweep", {})
    run_kw = values.get("run", {})

    cfg = RunConfig(
        model=spec,
        corpus=cspec,
        corpus_tokens=corpus_tokens,
        teacher=train_cfg("teacher", base.teacher),
        align=train_cfg("align", base.align),
        search=search,
        distill=train_cfg("distill", base.distill),
        distill_tau=values.get("distill", {}).get("tau", base.distill_tau),
        eval=dataclasses.replace(base.eval, **values.get("eval", {})),
        sweep_lambdas=sweep_kw.get("lambdas", base.sweep_lambdas),
        sweep_seeds=sweep_kw.get("seeds", base.sweep_seeds),
        seed=run_kw.get("seed", base.seed),
        out_dir=run_kw.get("out_dir", base.out_dir),
    )
    return cfg.reseeded(cfg.seed)


def write_config(cfg: RunConfig, path) -> None:
    """Emit a complete INI file for the given run configuration."""
    parser = configparser.ConfigParser()
    parser["model"] = {
        "n_layers": cfg.model.n_layers, "d_model": cfg.model.d_model,
        "n_heads": cfg.model.n_heads, "vocab": cfg.model.vocab,
        "max_seq": cfg.model.max_seq, "window": cfg.model.window,
        "ffn_mult": cfg.model.ffn_mult,
    }
    parser["corpus"] = {
        "n_tokens": cfg.corpus_tokens, "n_markov": cfg.corpus.n_markov,
        "n_keys": cfg.corpus.n_keys, "n_values": cfg.corpus.n_values,
        "recall_fraction": cfg.corpus.recall_fraction,
        "segment_len": cfg.corpus.segment_len,
        "pairs_per_segment": cfg.corpus.pairs_per_segment,
        "recall_gap": cfg.corpus.recall_gap, "table_seed": cfg.corpus.table_seed,
        "table_sharpness": cfg.corpus.table_sharpness,
    }
    for section, tc in (("teacher", cfg.teacher), ("align", cfg.align), ("distill", cfg.distill)):
        entry = {
            "steps": tc.steps, "batch": tc.batch, "seq_len": tc.seq_len,
            "lr_main": tc.lr_main, "weight_decay": tc.weight_decay,
            "schedule": tc.schedule,
        }
        if section != "teacher":
            entry["lr_attn_op"] = tc.lr_attn_op
        if section == "distill":
            entry["tau"] = cfg.distill_tau
        parser[section] = {k: str(v) for k, v in entry.items()}
    parser["search"] = {
        "lambda": cfg.search.lam, "tau": cfg.search.tau, "steps": cfg.search.steps,
        "grad_accum": cfg.search.grad_accum, "micro_batch": cfg.search.micro_batch,
        "seq_len": cfg.search.seq_len, "lr_alpha": cfg.search.lr_alpha,
        "t_arch_init": cfg.search.t_arch_init, "t_arch_final": cfg.search.t_arch_final,
        "anneal": str(cfg.search.anneal).lower(), "space": cfg.search.space,
    }
    parser["eval"] = {
        "heldout_batches": cfg.eval.heldout_batches,
        "recall_queries": cfg.eval.recall_queries,
        "recall_pairs": cfg.eval.recall_pairs,
        "recall_gap": cfg.eval.recall_gap,
    }
    parser["sweep"] = {
        "lambdas": ",".join(str(x) for x in cfg.sweep_lambdas),
        "seeds": ",".join(str(x) for x in cfg.sweep_seeds),
    }
    parser["run"] = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for section in parser.sections():
        for key, val in parser.items(section):
            parser[section][key] = str(val)
    with open(path, "w") as fh:
        parser.write(fh)


def recall_task(cfg: RunConfig, seed: int = 0) -> RecallTaskSpec:
    return RecallTaskSpec(
        n_queries=cfg.eval.recall_queries,
        n_pairs=cfg.eval.recall_pairs,
        gap=cfg.eval.recall_gap,
        seed=seed,
    )
