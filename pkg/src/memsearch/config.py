"""Run configuration: INI files layered over the packaged defaults."""

from __future__ import annotations

import configparser
import os
import zlib
from dataclasses import dataclass, replace
from importlib import resources

from .corpus import build_mem_subset, build_vocab, generate_corpus
from .denoiser import ArchConfig
from .diffusion import build_schedule
from .errors import ConfigError
from .evaluation import MetricsConfig
from .mitigation import MitigationConfig
from .search import SearchConfig
from .training import TrainConfig

SEED_ENV = "MEMSEARCH_SEED"

# section -> key -> type; a trailing "?" means an empty value is allowed (None)
SCHEMA = {
    "run": {"run_id": "str", "output_dir": "str", "seed": "int", "reproducible": "bool", "workers": "int"},
    "corpus": {
        "seed": "int?", "template_seed": "int?", "n_train": "int", "n_val": "int", "n_test": "int",
        "n_classes": "int", "height": "int", "width": "int", "noise_std": "float", "brightness": "float",
        "vocab_size": "int", "embed_dim": "int", "class_scale": "float", "vocab_seed": "int", "mem_n": "int",
        "mem_dup": "int", "mem_top_k": "int", "n_controls": "int", "hpo_fraction": "float", "hpo_seed": "int?",
    },
    "base_corpus": {"seed": "int?", "template_seed": "int?", "class_shift": "int", "n_train": "int",
                    "noise_std": "float", "brightness": "float"},
    "arch": {"hidden": "int"},
    "schedule": {"T": "int", "beta_start": "float", "beta_end": "float", "reverse_convention": "str"},
    "pretrain": {"steps": "int", "batch_size": "int", "learning_rate": "float", "seed": "int?",
                 "init_seed": "int?", "cond_dropout": "float"},
    "train": {"steps": "int", "batch_size": "int", "learning_rate": "float", "beta1": "float", "beta2": "float",
              "adam_eps": "float", "seed": "int?", "cond_dropout": "float"},
    "search": {"space": "str", "population": "int", "generations": "int", "trial_budget": "int",
               "crossover_prob": "float", "mutation_prob": "float?", "seed": "int?", "patience": "int",
               "normalize": "bool", "inner_seed": "int?", "inner_steps": "int?", "inner_learning_rate": "float?"},
    "metrics": {"n_noise_draws": "int", "attack_samples": "int", "tile": "int", "attack_k": "int",
                "delta_percentile": "float", "delta": "float?", "fid_mode": "str", "fid_k": "int",
                "fid_seed": "int", "seed": "int"},
    "mitigation": {"kind": "str", "rwa_insertions": "int", "rwa_prob": "float", "tau": "float?",
                   "tau_percentile": "float", "tau_refresh": "int", "action": "str"},
}
REQUIRED = ("run.run_id", "run.output_dir")


def derive_seed(master: int, name: str) -> int:
    """Stable per-purpose seed from the master seed."""
    return (int(master) * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 31)


def _convert(field: str, kind: str, raw: str):
    raw = raw.strip()
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if raw == "":
        if optional or kind == "str":
            return None if optional else ""
        raise ConfigError(field, "value required")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(field, f"expected {kind}, got {raw!r}") from None
    return raw


def read_config_values(path=None, text: str | None = None) -> dict:
    """Merge defaults with a run file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(resources.files("memsearch").joinpath("defaults.ini").read_text(encoding="utf-8"))
    user = configparser.ConfigParser(interpolation=None)
    user.optionxform = str
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                user.read_file(fh)
        if text is not None:
            user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"cannot parse: {exc}") from None
    for section in user.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, value in user.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            parser.set(section, key, value)
    values = {s: {k: _convert(f"{s}.{k}", t, parser.get(s, k)) for k, t in keys.items()}
              for s, keys in SCHEMA.items()}
    for field in REQUIRED:
        s, k = field.split(".")
        if not values[s][k]:
            raise ConfigError(field, "missing required field")
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        values["run"]["seed"] = _convert(SEED_ENV, "int", env)
    return values


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.2
    reverse_convention: str = "ddim"

    def __post_init__(self):
        if self.reverse_convention not in ("as_printed", "ddim"):
            raise ConfigError("schedule.reverse_convention", f"unknown convention {self.reverse_convention!r}")

    def build(self):
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    output_dir: str
    seed: int
    reproducible: bool
    workers: int
    corpus: dict
    base_corpus: dict
    arch: ArchConfig
    schedule: ScheduleConfig
    pretrain: TrainConfig
    pretrain_init_seed: int
    train: TrainConfig
    search: SearchConfig
    inner_train: TrainConfig
    metrics: MetricsConfig
    mitigation: MitigationConfig

    @property
    def run_dir(self) -> str:
        return os.path.join(self.output_dir, self.run_id)

    def vocab(self):
        c = self.corpus
        return build_vocab(c["vocab_size"], c["n_classes"], c["embed_dim"], c["vocab_seed"], c["class_scale"])

    def target_corpus(self):
        c = self.corpus
        return generate_corpus(c["seed"], c["n_train"], c["n_val"], c["n_test"], c["n_classes"], c["height"],
                               c["width"], self.vocab(), c["template_seed"], c["noise_std"], c["brightness"])

    def mem_corpus(self):
        """Target corpus with its duplicated memorization subset."""
        c = self.corpus
        return build_mem_subset(self.target_corpus(), c["mem_n"], c["mem_dup"], c["mem_top_k"])

    def base_corpus_data(self):
        c, b = self.corpus, self.base_corpus
        return generate_corpus(b["seed"], b["n_train"], 2, 2, c["n_classes"], c["height"], c["width"],
                               self.vocab(), b["template_seed"], b["noise_std"], b["brightness"], b["class_shift"])

    def with_mitigation(self, mitigation: MitigationConfig) -> "RunConfig":
        return replace(self, mitigation=mitigation, train=replace(self.train, mitigation=mitigation))


def _train_config(section: str, v: dict, seed: int, mitigation=None, **over) -> TrainConfig:
    kw = dict(steps=v["steps"], batch_size=v["batch_size"], learning_rate=v["learning_rate"], seed=seed,
              cond_dropout=v["cond_dropout"])
    for k in ("beta1", "beta2", "adam_eps"):
        if k in v:
            kw[k] = v[k]
    kw.update({k: val for k, val in over.items() if val is not None})
    if mitigation is not None:
        kw["mitigation"] = mitigation
    try:
        return TrainConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(exc.field.replace("train.", section + "."), str(exc).split(": ", 1)[-1]) from None


def build_run_config(values: dict) -> RunConfig:
    """Validate every section and derive unset seeds from the master seed."""
    run = values["run"]
    master = run["seed"]
    if run["workers"] < 1:
        raise ConfigError("run.workers", "must be >= 1")

    def seed(section, key="seed"):
        v = values[section][key]
        return derive_seed(master, f"{section}.{key}") if v is None else v

    corpus = dict(values["corpus"])
    corpus["seed"] = seed("corpus")
    corpus["hpo_seed"] = seed("corpus", "hpo_seed")
    if corpus["template_seed"] is None:
        corpus["template_seed"] = corpus["seed"]
    for key in ("n_train", "n_val", "n_test", "n_classes", "height", "width", "mem_top_k"):
        if corpus[key] < 1:
            raise ConfigError(f"corpus.{key}", "must be >= 1")
    if corpus["n_controls"] < 1 or corpus["n_controls"] > corpus["n_test"]:
        raise ConfigError("corpus.n_controls", "must lie in [1, corpus.n_test]")
    if corpus["mem_n"] < 1 or corpus["mem_n"] > corpus["n_train"]:
        raise ConfigError("corpus.mem_n", "must lie in [1, corpus.n_train]")
    if corpus["mem_dup"] < 0:
        raise ConfigError("corpus.mem_dup", "must be >= 0")
    if not 0.0 < corpus["hpo_fraction"] <= 1.0:
        raise ConfigError("corpus.hpo_fraction", "must lie in (0, 1]")
    if corpus["noise_std"] < 0:
        raise ConfigError("corpus.noise_std", "must be >= 0")
    if not corpus["class_scale"] > 0:
        raise ConfigError("corpus.class_scale", "must be > 0")
    if corpus["vocab_size"] - corpus["n_classes"] < 7:
        raise ConfigError("corpus.vocab_size", "need at least 7 descriptor tokens beyond the class tokens")

    base = dict(values["base_corpus"])
    base["seed"] = seed("base_corpus")
    if base["template_seed"] is None:
        base["template_seed"] = corpus["template_seed"]
    if base["n_train"] < 1:
        raise ConfigError("base_corpus.n_train", "must be >= 1")

    sched = ScheduleConfig(**values["schedule"])
    sched.build()
    arch = ArchConfig(D=corpus["height"] * corpus["width"], E=corpus["embed_dim"], hidden=values["arch"]["hidden"],
                      T=sched.T)

    mitigation = MitigationConfig(**values["mitigation"])
    p = values["pretrain"]
    pretrain = _train_config("pretrain", p, seed("pretrain"))
    init_seed = seed("pretrain", "init_seed")
    train = _train_config("train", values["train"], seed("train"), mitigation)

    s = dict(values["search"])
    inner_steps, inner_lr = s.pop("inner_steps"), s.pop("inner_learning_rate")
    s["seed"] = seed("search")
    s["inner_seed"] = seed("search", "inner_seed")
    search = SearchConfig(**s)
    inner = _train_config("search", values["train"], search.inner_seed, MitigationConfig(),
                          steps=inner_steps, learning_rate=inner_lr)

    m = values["metrics"]
    metrics = MetricsConfig(**m, convention=sched.reverse_convention)
    if corpus["height"] % m["tile"] or corpus["width"] % m["tile"]:
        raise ConfigError("metrics.tile", "must divide the image height and width")
    if not 0.0 <= m["delta_percentile"] <= 100.0:
        raise ConfigError("metrics.delta_percentile", "must lie in [0, 100]")

    return RunConfig(run_id=run["run_id"], output_dir=run["output_dir"], seed=master,
                     reproducible=run["reproducible"], workers=run["workers"], corpus=corpus, base_corpus=base,
                     arch=arch, schedule=sched, pretrain=pretrain, pretrain_init_seed=init_seed, train=train,
                     search=search, inner_train=inner, metrics=metrics, mitigation=mitigation)


def load_run_config(path=None, text: str | None = None) -> RunConfig:
    return build_run_config(read_config_values(path, text))
