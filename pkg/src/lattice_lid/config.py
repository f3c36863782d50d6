"""Run configuration: one JSON document covering corpus, model, training and evaluation."""

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .corpus import CorpusSpec
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "LATTICE_LID_SEED"


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ValueError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DataConfig:
    n_utts: int = 2400
    n_valid: int = 200
    n_test: int = 200

    def __post_init__(self):
        if min(self.n_utts, self.n_valid, self.n_test) < 0 or self.n_utts < 1:
            raise ValueError("split sizes must be non-negative and n_utts positive")

    def split(self, utts):
        """(train, valid, test): the last n_test are test, the n_valid before them valid."""
        n = len(utts)
        test_start = n - self.n_test
        valid_start = test_start - self.n_valid
        if valid_start <= 0:
            raise ValueError(f"corpus of {n} utterances too small for the configured splits")
        return utts[:valid_start], utts[valid_start:test_start], utts[test_start:]


@dataclass
class EvalConfig:
    decoder: str = "beam"
    beam_width: int = 10
    tau: float = 0.9
    boundary_tol: int = 2
    split: str = "test"

    def __post_init__(self):
        if self.decoder not in ("beam", "greedy"):
            raise ValueError("decoder must be 'beam' or 'greedy'")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class AblationConfig:
    # empty means the configured model variant only
    variants: list = field(default_factory=list)
    alphas: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    seeds: list = field(default_factory=lambda: [1])


SECTIONS = {
    "corpus": CorpusSpec,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self):
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, base=None):
        """Overlay ``d`` on ``base`` (defaults when omitted); unknown keys are rejected."""
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        merged = (base or cls()).to_dict()
        for name, section in d.items():
            if not isinstance(section, dict):
                raise ValueError(f"section {name!r} must be an object")
            merged[name].update(section)
        return cls(**{name: _strict(SECTIONS[name], merged[name], name) for name in SECTIONS})

    def replace(self, **sections):
        """Copy with per-section field overrides, e.g. ``replace(model={"alpha": 0.3})``."""
        return RunConfig.from_dict(sections, base=self)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, base=None):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base=base)

    def with_env_seed(self, environ=None):
        """Apply ``LATTICE_LID_SEED`` to both corpus and training seeds."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        seed = int(raw)
        return self.replace(corpus={"seed": seed}, train={"seed": seed})


def desk_preset():
    """Small model and corpus that train on one CPU core in minutes."""
    return RunConfig(
        corpus=CorpusSpec(seed=7),
        data=DataConfig(n_utts=2400, n_valid=200, n_test=200),
        model=ModelConfig(
            variant="proposed", dim=32, ff_dim=64, heads=2,
            n_blocks=6, taps=(2, 4), shared_blocks=4, expert_blocks=2, lid_tap=2, gt_tap=3,
            lambda_dis=10.0, alpha=0.3,
        ),
        train=TrainConfig(epochs=40, warmup=500, batch_size=16, keep_checkpoints=10, average_top_k=10),
        eval=EvalConfig(beam_width=10),
    )


def paper_preset():
    """Published architecture and recipe constants (15 blocks, 256/2048/4, 9-3-3, ...)."""
    return RunConfig(
        corpus=CorpusSpec(seed=7),
        data=DataConfig(),
        model=ModelConfig(
            variant="proposed", dim=256, ff_dim=2048, heads=4,
            n_blocks=15, taps=(3, 6, 9, 12), shared_blocks=9, expert_blocks=3, lid_tap=3, gt_tap=6,
            lambda_dis=10.0, alpha=0.3,
        ),
        train=TrainConfig(epochs=100, warmup=25000, keep_checkpoints=10, average_top_k=10),
        eval=EvalConfig(beam_width=10),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
