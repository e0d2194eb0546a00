"""Experiment configuration: one TOML file per run, fully seeded."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .ratenet import TrainConfig

OUTPUT_ENV_VAR = "GUIDELAB_OUT"


@dataclass(frozen=True)
class FixtureConfig:
    v: int = 4
    k: int = 1
    l_max: int = 6
    seed: int = 0
    eos_floor: float = 0.15
    conditions: tuple[str, ...] = ("x0",)
    keywords: dict[str, list[list[str]]] = field(default_factory=dict)


@dataclass(frozen=True)
class NetConfig:
    context_window: int = 4
    cond_dim: int = 4
    token_dim: int = 6
    pos_dim: int = 4
    hidden: tuple[int, ...] = (32,)
    count_features: bool = False
    seed: int = 0


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "sample"
    top_p: float = 1.0
    n_per_x: int = 50
    seed: int = 0
    rate: str = "learned"  # or "exact"
    include_rows: bool = False


@dataclass(frozen=True)
class EvalConfig:
    bleu_max_n: int = 4
    n_references: int = 20
    reference_seed: int = 1


@dataclass(frozen=True)
class VerifyConfig:
    n_fixtures: int = 10
    n_perturbations: int = 5
    n_tower: int = 3
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    fixture: FixtureConfig
    train: TrainConfig
    net: NetConfig
    decode: DecodeConfig
    evaluate: EvalConfig
    verify: VerifyConfig
    out_dir: Path
    polish_epochs: int = 0
    polish_lr: float = 0.05
    proposal_mix: float = 0.5
    sha256: str = ""


def _take(section: dict, path: str, key: str, kind, default):
    if key not in section:
        return default
    value = section.pop(key)
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {value!r}") from None


def load_config(path) -> ExperimentConfig:
    """Parse and validate a run configuration; raises ConfigError with a field path."""
    path = Path(path)
    try:
        raw_bytes = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    try:
        doc = tomllib.loads(raw_bytes.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML: {exc}") from None
    sha = hashlib.sha256(raw_bytes).hexdigest()

    fx = doc.pop("fixture", {})
    keywords = fx.pop("keywords", {})
    if not isinstance(keywords, dict):
        raise ConfigError("fixture.keywords: expected a table of condition -> patterns")
    fixture = FixtureConfig(
        v=_take(fx, "fixture", "v", int, 4),
        k=_take(fx, "fixture", "k", int, 1),
        l_max=_take(fx, "fixture", "l_max", int, 6),
        seed=_take(fx, "fixture", "seed", int, 0),
        eos_floor=_take(fx, "fixture", "eos_floor", float, 0.15),
        conditions=tuple(fx.pop("conditions", ["x0"])),
        keywords={x: [list(map(str, pat)) for pat in pats] for x, pats in keywords.items()},
    )
    if fixture.v < 2:
        raise ConfigError("fixture.v: must be at least 2")
    if fixture.l_max < 1:
        raise ConfigError("fixture.l_max: must be positive")
    if not 0.0 < fixture.eos_floor <= 1.0:
        raise ConfigError("fixture.eos_floor: must lie in (0, 1]")
    _reject_unknown(fx, "fixture")

    tr = doc.pop("train", {})
    net = NetConfig(
        context_window=_take(tr, "train", "context_window", int, 4),
        cond_dim=_take(tr, "train", "cond_dim", int, 4),
        token_dim=_take(tr, "train", "token_dim", int, 6),
        pos_dim=_take(tr, "train", "pos_dim", int, 4),
        hidden=tuple(tr.pop("hidden", [32])),
        count_features=_take(tr, "train", "count_features", bool, False),
        seed=_take(tr, "train", "net_seed", int, 0),
    )
    polish_epochs = _take(tr, "train", "polish_epochs", int, 0)
    polish_lr = _take(tr, "train", "polish_lr", float, 0.05)
    proposal_mix = _take(tr, "train", "proposal_mix", float, 0.5)
    try:
        train = TrainConfig(
            lam=_take(tr, "train", "lam", float, 0.1),
            lr=_take(tr, "train", "lr", float, 2e-5),
            epochs=_take(tr, "train", "epochs", int, 10),
            batch_size=_take(tr, "train", "batch_size", int, 0),
            samples_per_x=_take(tr, "train", "samples_per_x", int, 64),
            temperature=_take(tr, "train", "temperature", float, 1.0),
            importance_sampling=_take(tr, "train", "importance_sampling", bool, False),
            proposal_refresh_period=_take(tr, "train", "proposal_refresh_period", int, 0),
            warmup_epochs=_take(tr, "train", "warmup_epochs", int, 0),
            seed=_take(tr, "train", "seed", int, 0),
        )
    except Exception as exc:
        raise ConfigError(f"train: {exc}") from None
    _reject_unknown(tr, "train")

    dc = doc.pop("decode", {})
    decode = DecodeConfig(
        strategy=_take(dc, "decode", "strategy", str, "sample"),
        top_p=_take(dc, "decode", "top_p", float, 1.0),
        n_per_x=_take(dc, "decode", "n_per_x", int, 50),
        seed=_take(dc, "decode", "seed", int, 0),
        rate=_take(dc, "decode", "rate", str, "learned"),
        include_rows=_take(dc, "decode", "include_rows", bool, False),
    )
    if decode.strategy not in ("sample", "greedy"):
        raise ConfigError(f"decode.strategy: must be 'sample' or 'greedy', got {decode.strategy!r}")
    if decode.rate not in ("learned", "exact"):
        raise ConfigError(f"decode.rate: must be 'learned' or 'exact', got {decode.rate!r}")
    if not 0.0 < decode.top_p <= 1.0:
        raise ConfigError("decode.top_p: must lie in (0, 1]")
    if decode.n_per_x < 1:
        raise ConfigError("decode.n_per_x: must be at least 1")
    _reject_unknown(dc, "decode")

    ev = doc.pop("evaluate", {})
    evaluate = EvalConfig(
        bleu_max_n=_take(ev, "evaluate", "bleu_max_n", int, 4),
        n_references=_take(ev, "evaluate", "n_references", int, 20),
        reference_seed=_take(ev, "evaluate", "reference_seed", int, 1),
    )
    _reject_unknown(ev, "evaluate")

    vf = doc.pop("verify", {})
    verify = VerifyConfig(
        n_fixtures=_take(vf, "verify", "n_fixtures", int, 10),
        n_perturbations=_take(vf, "verify", "n_perturbations", int, 5),
        n_tower=_take(vf, "verify", "n_tower", int, 3),
        seed=_take(vf, "verify", "seed", int, 0),
    )
    _reject_unknown(vf, "verify")

    out = doc.pop("output", {})
    configured_dir = out.pop("dir", "runs/default")
    out_dir = Path(os.environ.get(OUTPUT_ENV_VAR) or configured_dir)
    _reject_unknown(out, "output")
    _reject_unknown(doc, "config")

    return ExperimentConfig(fixture=fixture, train=train, net=net, decode=decode,
                            evaluate=evaluate, verify=verify, out_dir=out_dir,
                            polish_epochs=polish_epochs, polish_lr=polish_lr,
                            proposal_mix=proposal_mix, sha256=sha)


def _reject_unknown(section: dict, path: str) -> None:
    if section:
        key = sorted(section)[0]
        raise ConfigError(f"{path}.{key}: unknown option")
