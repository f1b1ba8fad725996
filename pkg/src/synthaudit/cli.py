"""Config-driven pipeline orchestration.

One YAML config describes the whole experiment; subcommands run individual
stages or the full pipeline. Stages are idempotent: a completed stage (marked
by a sentinel file next to its artifacts) is skipped unless --force. Every
stage directory carries a snapshot of the resolved config, and training logs
open with a header line recording the stage configuration.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 report
conflict.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import yaml

from .audit import AuditError, ReportConflict

DEFAULT_CONFIG = {
    "output_dir": "runs/exp",
    "seed": 0,
    "deterministic": False,
    "corpus": {
        "n_total": 400,
        "side": 32,
        "protest_rate": 0.5,
        "split_seed": 0,
        "train_frac": 0.8,
        "with_demographics": True,
        "protest_rate_bias": {},
    },
    "gan": {
        "total_steps": 2000,
        "batch_size": 32,
        "gamma": 2.0,
        "d_steps_per_g_step": 5,
        "lr": 2e-4,
        "z_dim": 64,
        "width_g": 32,
        "width_d": 32,
        "augment": False,
        "unconditional": False,
        "pretrain_checkpoint": None,
        "log_every": 200,
    },
    "downstream": {
        "victims": ["real", "synthetic"],
        "epochs": 20,
        "batch_size": 32,
        "lr": 0.002,
        "momentum": 0.9,
        "width": 16,
        "augment": True,
        "weights": {"protest": 1.0, "violence": 10.0, "attributes": 5.0},
    },
    "dp": {
        "enabled": False,
        "clip_norm": 1.0,
        "noise_multiplier": 1.0,
        "target_delta": 1e-5,
    },
    "attack": {
        "thresholds": [0.5, 0.95, 0.99],
        "max_per_class": 500,
        "whitebox": {
            "last_k": 10,
            "epochs": 25,
            "batch_size": 32,
            "lr": 1e-4,
            "hidden": [64, 32],
        },
    },
    "audit": {
        "sample_n": 2000,
        "shift_sample_n": 2500,
        "min_count": 20,
        "violence_threshold": 0.5,
        "inherent_epsilon": 1.0,
    },
}

# per-stage seed offsets from the global seed
SEED_OFFSETS = {
    "corpus": 0,
    "gan": 1,
    "downstream.real": 2,
    "downstream.synthetic": 3,
    "downstream.dp": 4,
    "attack": 5,
    "audit": 6,
    "emit": 7,
}

OUTPUT_ROOT_ENV = "SYNTHAUDIT_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and not _open_dict(where):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _open_dict(path: str) -> bool:
    # free-form mappings whose keys are data, not schema
    return path in ("corpus.protest_rate_bias", "downstream.weights")


def _apply_override(config: dict, dotted: str, raw_value: str):
    value = yaml.safe_load(raw_value)
    keys = dotted.split(".")
    node = config
    for i, key in enumerate(keys[:-1]):
        prefix = ".".join(keys[: i + 1])
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {prefix}")
        node = node[key]
        if _open_dict(prefix):
            # remaining path addresses free-form data
            for k in keys[i + 1 : -1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
            return
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(f"{dotted}: cannot replace a section with a scalar")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        config = _merge(config, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, raw = item.split("=", 1)
        _apply_override(config, dotted.lstrip("-"), raw)
    _validate(config)
    return config


def _validate(config: dict):
    c = config["corpus"]
    if c["n_total"] < 10:
        raise ConfigError("corpus.n_total: must be >= 10")
    if not 0.0 < c["train_frac"] < 1.0:
        raise ConfigError("corpus.train_frac: must be in (0,1)")
    if config["gan"]["gamma"] < 0:
        raise ConfigError("gan.gamma: must be >= 0")
    if config["gan"]["d_steps_per_g_step"] < 1:
        raise ConfigError("gan.d_steps_per_g_step: must be >= 1")
    bad = set(config["downstream"]["victims"]) - {"real", "synthetic"}
    if bad:
        raise ConfigError(f"downstream.victims: unknown victim(s) {sorted(bad)}")
    if config["dp"]["clip_norm"] <= 0:
        raise ConfigError("dp.clip_norm: must be positive")
    if not 0.0 < config["audit"]["violence_threshold"] < 1.0:
        raise ConfigError("audit.violence_threshold: must be in (0,1)")


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _stage_seed(config: dict, stage: str) -> int:
    return int(config["seed"]) * 1000 + SEED_OFFSETS[stage]


# ---------------------------------------------------------------------------
# stage scaffolding


def _log(stage: str, status: str, **extra):
    print(json.dumps({"stage": stage, "status": status, **extra}))


def _resolve_output_dir(config: dict) -> Path:
    out = Path(config["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _stage_dir(config: dict, name: str) -> Path:
    return _resolve_output_dir(config) / name


def _stage_done(stage_dir: Path) -> bool:
    return (stage_dir / ".done").exists()


def _finish_stage(stage_dir: Path, config: dict):
    snap = stage_dir / "config.snapshot.json"
    snap.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    (stage_dir / ".done").write_text(config_digest(config) + "\n")


def _skip_or_reset(stage_dir: Path, name: str, force: bool) -> bool:
    """True when the stage is already complete and should be skipped."""
    if _stage_done(stage_dir) and not force:
        _log(name, "skipped", reason="already complete")
        return True
    if _stage_done(stage_dir):
        (stage_dir / ".done").unlink()
    stage_dir.mkdir(parents=True, exist_ok=True)
    return False


def _write_log_header(log_path: Path, header: dict):
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as f:
        f.write(json.dumps({"header": header}, sort_keys=True) + "\n")


def _atomic_checkpoint(handle, path: Path):
    from .modelcore import save_checkpoint

    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(handle, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# stages


def stage_gen_corpus(config: dict, force: bool) -> Path:
    from .corpus import ProceduralSpec, generate_corpus

    stage_dir = _stage_dir(config, "corpus")
    manifest = stage_dir / "manifest.csv"
    if _skip_or_reset(stage_dir, "gen-corpus", force):
        return manifest
    c = config["corpus"]
    spec = ProceduralSpec(
        n_total=c["n_total"],
        side=c["side"],
        protest_rate=c["protest_rate"],
        with_demographics=c["with_demographics"],
        protest_rate_bias=dict(c["protest_rate_bias"]),
        seed=_stage_seed(config, "corpus"),
        split_seed=c["split_seed"],
        train_frac=c["train_frac"],
    )
    generate_corpus(spec, stage_dir)
    _finish_stage(stage_dir, config)
    _log("gen-corpus", "done", n=c["n_total"], manifest=str(manifest))
    return manifest


def stage_train_gan(config: dict, force: bool) -> Path:
    from .corpus import load_corpus
    from .generative import GanTrainConfig, train_gan

    stage_dir = _stage_dir(config, "gan")
    ckpt = stage_dir / "generator.ckpt"
    if _skip_or_reset(stage_dir, "train-gan", force):
        return ckpt
    records = load_corpus(_stage_dir(config, "corpus") / "manifest.csv")
    g = config["gan"]
    cfg = GanTrainConfig(
        total_steps=g["total_steps"],
        batch_size=g["batch_size"],
        gamma=g["gamma"],
        d_steps_per_g_step=g["d_steps_per_g_step"],
        lr=g["lr"],
        z_dim=g["z_dim"],
        width_g=g["width_g"],
        width_d=g["width_d"],
        augment=g["augment"],
        unconditional=g["unconditional"],
        pretrain_checkpoint=g["pretrain_checkpoint"],
        seed=_stage_seed(config, "gan"),
        log_every=g["log_every"],
    )
    log_path = stage_dir / "train_log.jsonl"
    _write_log_header(log_path, {"stage": "train-gan", **g})
    gen, _, _ = train_gan(records, cfg, log_path=log_path)
    _atomic_checkpoint(gen, ckpt)
    _finish_stage(stage_dir, config)
    _log("train-gan", "done", checkpoint=str(ckpt))
    return ckpt


def stage_emit_synth(config: dict, force: bool) -> Path:
    from .corpus import load_corpus
    from .generative import emit_synthetic
    from .modelcore import load_checkpoint

    stage_dir = _stage_dir(config, "synth")
    manifest = stage_dir / "manifest.csv"
    if _skip_or_reset(stage_dir, "emit-synth", force):
        return manifest
    records = load_corpus(_stage_dir(config, "corpus") / "manifest.csv")
    train = [r for r in records if r.split == "train"]
    gen = load_checkpoint(_stage_dir(config, "gan") / "generator.ckpt")
    emit_synthetic(gen, train, stage_dir, z_seed=_stage_seed(config, "emit"))
    _finish_stage(stage_dir, config)
    _log("emit-synth", "done", n=len(train), manifest=str(manifest))
    return manifest


def _downstream_cfg(config: dict, seed: int):
    from .downstream import DownstreamTrainConfig, HybridLossWeights

    d = config["downstream"]
    w = d["weights"]
    return DownstreamTrainConfig(
        epochs=d["epochs"],
        batch_size=d["batch_size"],
        lr=d["lr"],
        momentum=d["momentum"],
        width=d["width"],
        augment=d["augment"],
        weights=HybridLossWeights(w["protest"], w["violence"], w["attributes"]),
        seed=seed,
    )


def stage_train_downstream(config: dict, force: bool) -> dict:
    from .corpus import load_corpus
    from .downstream import DpSgdConfig, train_downstream

    real = None
    paths = {}
    victims = list(config["downstream"]["victims"])
    if config["dp"]["enabled"]:
        victims.append("dp")
    for victim in victims:
        stage_dir = _stage_dir(config, f"downstream/{victim}")
        ckpt = stage_dir / "model.ckpt"
        paths[victim] = ckpt
        if _skip_or_reset(stage_dir, f"train-downstream/{victim}", force):
            continue
        if victim == "synthetic":
            records = load_corpus(_stage_dir(config, "synth") / "manifest.csv")
        else:
            if real is None:
                real = load_corpus(_stage_dir(config, "corpus") / "manifest.csv")
            records = real
        cfg = _downstream_cfg(config, _stage_seed(config, f"downstream.{victim}"))
        dp = None
        if victim == "dp":
            dp = DpSgdConfig(
                clip_norm=config["dp"]["clip_norm"],
                noise_multiplier=config["dp"]["noise_multiplier"],
                target_delta=config["dp"]["target_delta"],
            )
        log_path = stage_dir / "train_log.jsonl"
        _write_log_header(
            log_path, {"stage": f"train-downstream/{victim}", **config["downstream"]}
        )
        handle, _, dp_summary = train_downstream(records, cfg, dp=dp, log_path=log_path)
        _atomic_checkpoint(handle, ckpt)
        if dp_summary is not None:
            (stage_dir / "dp.json").write_text(
                json.dumps(dp_summary, sort_keys=True, indent=2) + "\n"
            )
        _finish_stage(stage_dir, config)
        _log(f"train-downstream/{victim}", "done", checkpoint=str(ckpt))
    return paths


def stage_attack(config: dict, force: bool) -> Path:
    from .attacks import (
        WhiteboxConfig,
        blackbox_scores,
        build_attack_pool,
        run_blackbox_attack,
        run_whitebox_attack,
    )
    from .corpus import load_corpus
    from .downstream import HybridLossWeights
    from .modelcore import load_checkpoint

    stage_dir = _stage_dir(config, "attacks")
    out_path = stage_dir / "attacks.json"
    if _skip_or_reset(stage_dir, "attack", force):
        return out_path
    records = load_corpus(_stage_dir(config, "corpus") / "manifest.csv")
    members = [r for r in records if r.split == "train"]
    non_members = [r for r in records if r.split == "test"]
    pool = build_attack_pool(
        members,
        non_members,
        seed=_stage_seed(config, "attack"),
        max_per_class=config["attack"]["max_per_class"],
    )

    a = config["attack"]
    w = config["downstream"]["weights"]
    wb_cfg = WhiteboxConfig(
        last_k=a["whitebox"]["last_k"],
        epochs=a["whitebox"]["epochs"],
        batch_size=a["whitebox"]["batch_size"],
        lr=a["whitebox"]["lr"],
        hidden=tuple(a["whitebox"]["hidden"]),
        weights=HybridLossWeights(w["protest"], w["violence"], w["attributes"]),
        seed=_stage_seed(config, "attack"),
    )

    victims = list(config["downstream"]["victims"])
    if config["dp"]["enabled"]:
        victims.append("dp")
    results = {}
    for victim_name in victims:
        ckpt = _stage_dir(config, f"downstream/{victim_name}") / "model.ckpt"
        victim = load_checkpoint(ckpt)
        bb = run_blackbox_attack(victim, pool, thresholds=tuple(a["thresholds"]))
        wb = run_whitebox_attack(victim, pool, wb_cfg)
        results[victim_name] = {"blackbox": bb, "whitebox": wb}
        scores = blackbox_scores(victim, pool.records)
        with open(stage_dir / f"blackbox_scores_{victim_name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "score", "is_member"])
            for rec, s, m in zip(pool.records, scores, pool.membership):
                writer.writerow([rec.id, f"{s:.6g}", int(m)])
    out_path.write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
    _finish_stage(stage_dir, config)
    _log("attack", "done", victims=victims, report=str(out_path))
    return out_path


def stage_audit(config: dict, force: bool) -> Path:
    from .audit import (
        Embedder,
        attack_section,
        audit_demographic_shift,
        audit_fairness,
        audit_generative,
        audit_utility,
        compile_report,
        privacy_section,
    )
    from .corpus import corpus_digest, load_corpus
    from .modelcore import load_checkpoint

    stage_dir = _stage_dir(config, "audit")
    report_path = stage_dir / "report.json"
    if _skip_or_reset(stage_dir, "audit", force):
        return report_path

    real_manifest = _stage_dir(config, "corpus") / "manifest.csv"
    synth_manifest = _stage_dir(config, "synth") / "manifest.csv"
    real = load_corpus(real_manifest)
    synth = load_corpus(synth_manifest)
    digests = {
        "real": corpus_digest(real_manifest),
        "synthetic": corpus_digest(synth_manifest),
    }
    victim = load_checkpoint(_stage_dir(config, "downstream/real") / "model.ckpt")
    embedder = Embedder(
        victim, provenance=f"downstream-cnn(real)/penultimate/seed{victim.seed}"
    )
    test = [r for r in real if r.split == "test"]
    train = [r for r in real if r.split == "train"]
    au = config["audit"]
    seed = _stage_seed(config, "audit")

    dp_summary = None
    dp_json = _stage_dir(config, "downstream/dp") / "dp.json"
    if dp_json.exists():
        dp_summary = json.loads(dp_json.read_text())

    sections = [
        audit_generative(
            real, synth, embedder, sample_n=au["sample_n"], seed=seed,
            corpus_digests=digests,
        ),
        audit_utility(victim, test, corpus_digests={"real": digests["real"]}),
        audit_fairness(
            victim,
            test,
            min_count=au["min_count"],
            violence_threshold=au["violence_threshold"],
            corpus_digests={"real": digests["real"]},
        ),
        audit_demographic_shift(
            real, synth, sample_n=au["shift_sample_n"], seed=seed,
            corpus_digests=digests,
        ),
        privacy_section(
            n_synth=len(synth),
            n_train=len(train),
            epsilon=au["inherent_epsilon"],
            dp_sgd=dp_summary,
        ),
    ]
    attacks_json = _stage_dir(config, "attacks") / "attacks.json"
    if attacks_json.exists():
        sections.append(
            attack_section(json.loads(attacks_json.read_text()), corpus_digests=digests)
        )
    compile_report(
        sections,
        stage_dir,
        config_digest=config_digest(config),
        deterministic=bool(config["deterministic"]),
    )
    _finish_stage(stage_dir, config)
    _log("audit", "done", report=str(report_path))
    return report_path


PIPELINE = (
    stage_gen_corpus,
    stage_train_gan,
    stage_emit_synth,
    stage_train_downstream,
    stage_attack,
    stage_audit,
)


def run_compare(path_a, path_b) -> dict:
    from .audit import compare_reports, load_report

    return compare_reports(load_report(path_a), load_report(path_b))


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthaudit",
        description="Synthetic-image replacement pipeline with privacy, "
        "utility, and fairness auditing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stage_names = [
        "gen-corpus",
        "train-gan",
        "emit-synth",
        "train-downstream",
        "attack",
        "audit",
        "pipeline",
    ]
    for name in stage_names:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument("--force", action="store_true", help="rerun completed stages")
        p.add_argument("--jobs", type=int, default=None, help="worker thread cap")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument(
            "overrides", nargs="*", metavar="key.path=value",
            help="dotted config overrides",
        )
    cmp_p = sub.add_parser("compare")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    return parser


_COMMANDS = {
    "gen-corpus": (stage_gen_corpus,),
    "train-gan": (stage_train_gan,),
    "emit-synth": (stage_emit_synth,),
    "train-downstream": (stage_train_downstream,),
    "attack": (stage_attack,),
    "audit": (stage_audit,),
    "pipeline": PIPELINE,
}


def main(argv=None) -> int:
    from .downstream import TrainingDiverged
    from .generative import GanDivergence

    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            try:
                delta = run_compare(args.report_a, args.report_b)
            except (OSError, json.JSONDecodeError) as e:
                print(f"cannot read report: {e}", file=sys.stderr)
                return 2
            print(json.dumps(delta, indent=2))
            return 0
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            config["seed"] = args.seed
        if args.deterministic:
            config["deterministic"] = True
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            import torch

            torch.set_num_threads(args.jobs)
        for stage in _COMMANDS[args.command]:
            stage(config, args.force)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, GanDivergence) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except ReportConflict as e:
        print(f"report conflict: {e}", file=sys.stderr)
        return 4
    except AuditError as e:
        print(f"report error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
