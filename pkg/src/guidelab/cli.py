"""Command-line entry point: fixture generation, training, decoding, evaluation,
verification, and report rendering, with per-run manifests."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    EvalReport,
    bleu_n,
    consistency_residual_profile,
    kl_full,
    sample_step_model,
)
from .config import ExperimentConfig, load_config
from .decode import GuidedModel, decode_records
from .errors import ConfigError, GuidelabError
from .exact import ExactConstrained, ExactRate
from .oracle import LexicalOracle
from .ratenet import RateNet, train, train_pipeline
from .seqmodel import TabularBaseModel, random_tabular_model
from .storage import ArtifactSession, RunManifest, append_jsonl, atomic_write_json
from .verify import run_verification

MODEL_FILE = "model.json"
ORACLE_FILE = "oracle.json"
NET_FILE = "ratenet.json"
TRAIN_LOG = "train_log.jsonl"
DECODES_FILE = "decodes.jsonl"
EVAL_FILE = "eval_report.json"
VERIFY_FILE = "verify_report.json"


def _load_fixture(cfg: ExperimentConfig) -> tuple[TabularBaseModel, LexicalOracle]:
    base = TabularBaseModel.load(cfg.out_dir / MODEL_FILE)
    oracle = LexicalOracle.load(cfg.out_dir / ORACLE_FILE, base.vocab)
    return base, oracle


def cmd_gen_fixture(cfg: ExperimentConfig) -> int:
    with ArtifactSession(cfg.out_dir, "gen-fixture") as session:
        base = random_tabular_model(cfg.fixture.seed, cfg.fixture.v, cfg.fixture.k,
                                    cfg.fixture.l_max, cfg.fixture.eos_floor,
                                    conditions=cfg.fixture.conditions)
        if not cfg.fixture.keywords:
            raise ConfigError("fixture.keywords: at least one condition with patterns is required")
        keywords = {}
        for x, pats in cfg.fixture.keywords.items():
            if x not in cfg.fixture.conditions:
                raise ConfigError(f"fixture.keywords.{x}: condition not in fixture.conditions")
            keywords[x] = [tuple(base.vocab.id_of(tok) for tok in pat) for pat in pats]
        oracle = LexicalOracle(keywords)
        base.save(session.track(cfg.out_dir / MODEL_FILE))
        oracle.save(session.track(cfg.out_dir / ORACLE_FILE), base.vocab)
        RunManifest(cfg.out_dir).record("gen-fixture", cfg.sha256,
                                        session.written, session.wall_seconds)
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    with ArtifactSession(cfg.out_dir, "train") as session:
        base, oracle = _load_fixture(cfg)
        net = RateNet(vocab_size=base.vocab.size, conditions=base.conditions,
                      l_max=base.l_max, context_window=cfg.net.context_window,
                      cond_dim=cfg.net.cond_dim, token_dim=cfg.net.token_dim,
                      pos_dim=cfg.net.pos_dim, hidden=cfg.net.hidden,
                      count_features=cfg.net.count_features, seed=cfg.net.seed)
        result = train_pipeline(net, base, oracle, list(base.conditions), cfg.train,
                                proposal_mix=cfg.proposal_mix)
        losses, residuals = result.losses, result.residuals
        if cfg.polish_epochs > 0:
            from dataclasses import replace
            from .ratenet import sample_training_set
            polish_cfg = replace(cfg.train, lr=cfg.polish_lr, epochs=cfg.polish_epochs,
                                 importance_sampling=False)
            examples = sample_training_set(base, oracle, list(base.conditions), cfg.train)
            _, pl, pr = train(net, examples, base, polish_cfg)
            losses, residuals = losses + pl, residuals + pr

        log_path = session.track(cfg.out_dir / TRAIN_LOG)
        if log_path.exists():
            log_path.unlink()
        append_jsonl(log_path, {"kind": "meta", "examples_total": result.examples_total,
                                "examples_positive": result.examples_positive,
                                "warmup_positives": result.warmup_positives})
        for i, (loss, resid) in enumerate(zip(losses, residuals)):
            append_jsonl(log_path, {"kind": "epoch", "epoch": i, "loss": loss, "residual": resid})
        net.save(session.track(cfg.out_dir / NET_FILE))
        RunManifest(cfg.out_dir).record("train", cfg.sha256, session.written, session.wall_seconds)
    return 0


def _guided_model(cfg: ExperimentConfig, base, oracle) -> GuidedModel:
    if cfg.decode.rate == "exact":
        return GuidedModel(base, ExactRate(base, oracle), descriptor="guided-exact")
    return GuidedModel(base, RateNet.load(cfg.out_dir / NET_FILE), descriptor="guided-learned")


def cmd_decode(cfg: ExperimentConfig) -> int:
    with ArtifactSession(cfg.out_dir, "decode") as session:
        base, oracle = _load_fixture(cfg)
        gm = _guided_model(cfg, base, oracle)
        records = decode_records(gm, oracle, list(base.conditions), cfg.decode.n_per_x,
                                 strategy=cfg.decode.strategy, top_p=cfg.decode.top_p,
                                 seed=cfg.decode.seed, include_rows=cfg.decode.include_rows)
        path = session.track(cfg.out_dir / DECODES_FILE)
        if path.exists():
            path.unlink()
        for record in records:
            append_jsonl(path, record.to_json_dict())
        RunManifest(cfg.out_dir).record("decode", cfg.sha256, session.written, session.wall_seconds)
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    with ArtifactSession(cfg.out_dir, "evaluate") as session:
        base, oracle = _load_fixture(cfg)
        gm = _guided_model(cfg, base, oracle)
        from .storage import read_jsonl
        records = read_jsonl(cfg.out_dir / DECODES_FILE)
        hits = sum(r["oracle_bit"] for r in records)
        cov = hits / len(records)

        er = ExactRate(base, oracle)
        qstar = ExactConstrained(er)
        kl = float(np.mean([kl_full(qstar, gm, x) for x in base.conditions]))
        resid = float(np.mean([consistency_residual_profile(gm.rate, base, er, x)[1]
                               for x in base.conditions]))

        rng = np.random.default_rng(cfg.evaluate.reference_seed)
        candidates, references = [], []
        by_x: dict[str, list] = {}
        for r in records:
            by_x.setdefault(r["x"], []).append([base.vocab.tokens[t] for t in r["tokens"][:-1]])
        for x, cands in sorted(by_x.items()):
            refs = []
            for _ in range(cfg.evaluate.n_references):
                seq, _ = sample_step_model(qstar, x, rng)
                refs.append([base.vocab.tokens[t] for t in seq.y[:-1]])
            for cand in cands:
                candidates.append(cand)
                references.append(refs)
        bleu = bleu_n(candidates, references, cfg.evaluate.bleu_max_n)

        report = EvalReport(coverage=cov, kl_to_qstar=kl, mean_reg_residual=resid,
                            bleu=bleu, sample_size=len(records))
        atomic_write_json(session.track(cfg.out_dir / EVAL_FILE), report.to_json_dict())
        RunManifest(cfg.out_dir).record("evaluate", cfg.sha256, session.written,
                                        session.wall_seconds)
    return 0


def cmd_verify(cfg: ExperimentConfig) -> int:
    with ArtifactSession(cfg.out_dir, "verify") as session:
        report = run_verification(n_fixtures=cfg.verify.n_fixtures,
                                  n_perturbations=cfg.verify.n_perturbations,
                                  n_tower=cfg.verify.n_tower, seed=cfg.verify.seed)
        atomic_write_json(session.track(cfg.out_dir / VERIFY_FILE), report.to_json_dict())
        RunManifest(cfg.out_dir).record("verify", cfg.sha256, session.written,
                                        session.wall_seconds)
        for check in report.checks:
            status = "ok" if check.passed else "FAIL"
            print(f"[{status}] {check.name} (worst deviation {check.worst:.3e})")
        if not report.passed:
            first = next(c for c in report.checks if not c.passed)
            print(f"verification failed at {first.name}: {first.detail}", file=sys.stderr)
            return 1
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    from .report import render_eval_figure, render_training_figures, write_training_csv

    with ArtifactSession(cfg.out_dir, "report") as session:
        written = []
        log = cfg.out_dir / TRAIN_LOG
        if log.exists():
            written.append(session.track(write_training_csv(log, cfg.out_dir / "report.csv")))
            written.extend(session.track(p) for p in render_training_figures(log, cfg.out_dir))
        eval_path = cfg.out_dir / EVAL_FILE
        if eval_path.exists():
            written.append(session.track(render_eval_figure(eval_path, cfg.out_dir)))
        if not written:
            raise GuidelabError("nothing to report: run train/evaluate first")
        RunManifest(cfg.out_dir).record("report", cfg.sha256, session.written,
                                        session.wall_seconds)
    return 0


COMMANDS = {
    "gen-fixture": cmd_gen_fixture,
    "train": cmd_train,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="guidelab",
                                     description="Oracle-guided sequence generation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="path to the run TOML file")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
