"""Audit recipes and the consolidated report.

Sections: generative quality (FID/KID/IS against a frozen embedding network),
downstream utility, membership-attack results, statistical-parity matrices
across demographic groups, demographic distribution shift, and privacy
accounting. `compile_report` merges sections into one schema-versioned JSON
report with companion plot-data CSVs and rendered figures.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .corpus import ATTRIBUTE_NAMES, AGE_BUCKETS, GENDERS, RACES, ImageRecord
from .downstream import evaluate_downstream, predict
from .metrics import EmbeddingSet, fid, inception_score, kid, spd_matrix
from .modelcore import ModelHandle

SCHEMA_VERSION = 1
DETERMINISTIC_TIMESTAMP = "1970-01-01T00:00:00+00:00"

SENSITIVE_DIMS = {
    "age_bucket": AGE_BUCKETS,
    "gender": GENDERS,
    "race": RACES,
}


class AuditError(Exception):
    pass


class ReportConflict(AuditError):
    """Two sections claim different digests for the same corpus role."""


# ---------------------------------------------------------------------------
# embedding network


@dataclass
class Embedder:
    """Frozen feature extractor: the penultimate layer of a classifier trained
    on real data. All FID/KID/IS numbers are comparable only within one
    provenance string."""

    handle: ModelHandle
    provenance: str


def embed_records(embedder: Embedder, records: list[ImageRecord], batch_size=128) -> EmbeddingSet:
    x = torch.from_numpy(
        np.stack([r.image for r in records]).transpose(0, 3, 1, 2)
    ).float()
    outs = []
    for start in range(0, x.shape[0], batch_size):
        with torch.no_grad():
            outs.append(embedder.handle.module.embedding(x[start : start + batch_size]))
    return EmbeddingSet(torch.cat(outs).numpy(), provenance=embedder.provenance)


def class_posteriors(embedder: Embedder, records: list[ImageRecord], batch_size=128) -> np.ndarray:
    """Per-sample class distribution from the embedder's protest + attribute
    logits (11 classes, softmax-normalized)."""
    x = torch.from_numpy(
        np.stack([r.image for r in records]).transpose(0, 3, 1, 2)
    ).float()
    outs = []
    for start in range(0, x.shape[0], batch_size):
        with torch.no_grad():
            logits = embedder.handle.module(x[start : start + batch_size])
        cls = torch.cat([logits[:, :1], logits[:, 2:12]], dim=1)
        outs.append(torch.softmax(cls, dim=1))
    return torch.cat(outs).numpy().astype(np.float64)


def _subsample(records, n, seed):
    if len(records) <= n:
        return list(records)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=n, replace=False)
    return [records[i] for i in idx]


# ---------------------------------------------------------------------------
# sections


def audit_generative(
    real: list[ImageRecord],
    synth: list[ImageRecord],
    embedder: Embedder,
    sample_n: int = 2000,
    seed: int = 0,
    corpus_digests: dict | None = None,
) -> dict:
    real_s = _subsample(real, sample_n, seed)
    synth_s = _subsample(synth, sample_n, seed)
    e_real = embed_records(embedder, real_s)
    e_synth = embed_records(embedder, synth_s)
    return {
        "kind": "generative",
        "fid": fid(e_real, e_synth),
        "kid": kid(e_real, e_synth),
        "inception_score": inception_score(class_posteriors(embedder, synth_s)),
        "n_real": len(real_s),
        "n_synth": len(synth_s),
        "embedding_provenance": embedder.provenance,
        "corpus_digests": dict(corpus_digests or {}),
    }


def audit_utility(
    victim: ModelHandle, records: list[ImageRecord], corpus_digests: dict | None = None
) -> dict:
    report = evaluate_downstream(victim, records)
    report["kind"] = "utility"
    report["corpus_digests"] = dict(corpus_digests or {})
    return report


def audit_fairness(
    victim: ModelHandle,
    records: list[ImageRecord],
    min_count: int = 20,
    violence_threshold: float = 0.5,
    corpus_digests: dict | None = None,
) -> dict:
    """Pairwise statistical-parity matrices for 12 predicted outcomes
    (protest, binarized violence, 10 attributes) across each sensitive
    dimension. Groups under min_count are excluded and listed."""
    if any(r.annotation.demographics is None for r in records):
        raise AuditError("fairness audit requires demographics on every record")
    if not 0.0 < violence_threshold < 1.0:
        raise AuditError("violence_threshold must be in (0,1)")
    preds = predict(victim, records)
    outcomes = {"protest": preds["protest"] >= 0.5, "violence": preds["violence"] >= violence_threshold}
    for j, name in enumerate(ATTRIBUTE_NAMES):
        outcomes[name] = preds["attributes"][:, j] >= 0.5

    matrices = {}
    excluded = {}
    for dim in SENSITIVE_DIMS:
        groups = np.array([getattr(r.annotation.demographics, dim) for r in records])
        labels, counts = np.unique(groups, return_counts=True)
        keep_labels = set(labels[counts >= min_count].tolist())
        excluded[dim] = sorted(set(labels.tolist()) - keep_labels)
        keep = np.array([g in keep_labels for g in groups])
        if not keep.any():
            raise AuditError(f"no {dim} group reaches min_count={min_count}")
        matrices[dim] = {}
        for name, outcome in outcomes.items():
            m = spd_matrix(outcome[keep].astype(int), groups[keep], min_count=min_count)
            matrices[dim][name] = {
                "groups": m.groups,
                "rates": m.rates.tolist(),
                "counts": m.counts.tolist(),
                "spd": m.spd.tolist(),
                "ci_lo": m.ci_lo.tolist(),
                "ci_hi": m.ci_hi.tolist(),
            }
    return {
        "kind": "fairness",
        "min_count": min_count,
        "violence_threshold": violence_threshold,
        "excluded_groups": excluded,
        "matrices": matrices,
        "n": len(records),
        "corpus_digests": dict(corpus_digests or {}),
    }


def audit_demographic_shift(
    real: list[ImageRecord],
    synth: list[ImageRecord],
    sample_n: int = 2500,
    seed: int = 0,
    corpus_digests: dict | None = None,
) -> dict:
    """Category histograms per sensitive dimension for both corpora, with the
    total-variation distance between them."""
    real_s = _subsample(real, sample_n, seed)
    synth_s = _subsample(synth, sample_n, seed)
    for r in real_s + synth_s:
        if r.annotation.demographics is None:
            raise AuditError("demographic shift audit requires demographics")

    out = {
        "kind": "demographic_shift",
        "n_real": len(real_s),
        "n_synth": len(synth_s),
        "dims": {},
        "corpus_digests": dict(corpus_digests or {}),
    }
    for dim, categories in SENSITIVE_DIMS.items():
        def hist(rs):
            vals = [getattr(r.annotation.demographics, dim) for r in rs]
            counts = np.array([vals.count(c) for c in categories], dtype=np.float64)
            return counts / counts.sum()

        p, q = hist(real_s), hist(synth_s)
        out["dims"][dim] = {
            "categories": list(categories),
            "real": p.tolist(),
            "synth": q.tolist(),
            "tv_distance": float(0.5 * np.abs(p - q).sum()),
        }
    return out


def privacy_section(
    n_synth: int,
    n_train: int,
    epsilon: float = 1.0,
    c: float = 1.0,
    dp_sgd: dict | None = None,
) -> dict:
    from .generative import inherent_dp_delta

    return {
        "kind": "privacy",
        "inherent_dp": {
            "epsilon": epsilon,
            "delta": inherent_dp_delta(n_synth, n_train, epsilon, c),
            "n_synth": n_synth,
            "n_train": n_train,
            "c": c,
        },
        "dp_sgd": dp_sgd,
    }


def attack_section(reports: dict, corpus_digests: dict | None = None) -> dict:
    """Wrap per-victim attack results (from the attacks module) as a section."""
    return {"kind": "attacks", "victims": reports, "corpus_digests": dict(corpus_digests or {})}


# ---------------------------------------------------------------------------
# report assembly


def _merge_digests(sections) -> dict:
    merged: dict = {}
    for s in sections:
        for role, digest in s.get("corpus_digests", {}).items():
            if role in merged and merged[role] != digest:
                raise ReportConflict(
                    f"corpus role {role!r}: digest {digest} conflicts with {merged[role]}"
                )
            merged[role] = digest
    return merged


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def load_report(path) -> dict:
    with open(path) as f:
        report = json.load(f)
    if report.get("schema_version") != SCHEMA_VERSION:
        raise AuditError(
            f"unsupported report schema version {report.get('schema_version')!r}"
        )
    return report


def compile_report(
    sections: list[dict],
    out_dir,
    config_digest: str = "",
    deterministic: bool = False,
    render_figures: bool = True,
) -> Path:
    """Merge sections into report.json + companion CSVs (+ figure PNGs).

    In deterministic mode the timestamp is a fixed sentinel so identical runs
    produce byte-identical reports.
    """
    out_dir = Path(out_dir)
    by_kind: dict = {}
    for s in sections:
        kind = s.get("kind")
        if not kind:
            raise AuditError("every section needs a 'kind' field")
        if kind in by_kind:
            raise AuditError(f"duplicate section kind {kind!r}")
        by_kind[kind] = s

    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config_digest": config_digest,
        "generated_at": DETERMINISTIC_TIMESTAMP
        if deterministic
        else datetime.now(timezone.utc).isoformat(),
        "deterministic": deterministic,
        "corpus_digests": _merge_digests(sections),
        "sections": by_kind,
    }
    path = out_dir / "report.json"
    _atomic_write_text(path, serialize_report(report))
    _write_companion_csvs(report, out_dir)
    if render_figures:
        from .plots import render_report_figures

        render_report_figures(report, out_dir)
    return path


def report_digest(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _write_companion_csvs(report: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = report["sections"]

    util = sections.get("utility")
    if util is not None:
        if "roc" in util.get("protest", {}):
            _write_csv(
                out_dir / "roc_protest.csv",
                ["fpr", "tpr"],
                [(f"{a:.6g}", f"{b:.6g}") for a, b in util["protest"]["roc"]],
            )
        scatter = util.get("violence", {}).get("scatter")
        if scatter:
            _write_csv(
                out_dir / "violence_scatter.csv",
                ["violence_true", "violence_pred"],
                [(f"{a:.6g}", f"{b:.6g}") for a, b in scatter],
            )

    fair = sections.get("fairness")
    if fair is not None:
        rows = []
        for dim, outcomes in fair["matrices"].items():
            for outcome, m in outcomes.items():
                groups = m["groups"]
                for i, gi in enumerate(groups):
                    for j, gj in enumerate(groups):
                        rows.append(
                            (
                                dim,
                                outcome,
                                gi,
                                gj,
                                f"{m['spd'][i][j]:.6g}",
                                f"{m['ci_lo'][i][j]:.6g}",
                                f"{m['ci_hi'][i][j]:.6g}",
                                m["counts"][i],
                                m["counts"][j],
                            )
                        )
        _write_csv(
            out_dir / "spd_cells.csv",
            ["dimension", "outcome", "group_i", "group_j", "spd", "ci_lo", "ci_hi", "n_i", "n_j"],
            rows,
        )

    shift = sections.get("demographic_shift")
    if shift is not None:
        rows = []
        for dim, d in shift["dims"].items():
            for cat, p, q in zip(d["categories"], d["real"], d["synth"]):
                rows.append((dim, cat, f"{p:.6g}", f"{q:.6g}"))
        _write_csv(
            out_dir / "demographic_histograms.csv",
            ["dimension", "category", "real_frac", "synth_frac"],
            rows,
        )


def compare_reports(a: dict, b: dict) -> dict:
    """Numeric deltas (B - A) for shared scalar metrics. Sign conventions:
    lower FID/KID and lower attack AUC are better; higher utility AUC is
    better."""
    if a.get("schema_version") != b.get("schema_version"):
        raise AuditError("cannot compare reports with different schema versions")

    def scalars(report, prefix="", out=None):
        out = {} if out is None else out
        node = report["sections"] if prefix == "" else report
        for key, val in node.items():
            path = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, dict):
                scalars(val, path, out)
            elif isinstance(val, (int, float)) and not isinstance(val, bool):
                out[path] = float(val)
        return out

    sa, sb = scalars(a), scalars(b)
    deltas = {k: sb[k] - sa[k] for k in sorted(set(sa) & set(sb))}
    return {
        "schema_version": a["schema_version"],
        "only_in_a": sorted(set(sa) - set(sb)),
        "only_in_b": sorted(set(sb) - set(sa)),
        "deltas": deltas,
    }
