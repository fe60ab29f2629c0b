"""Command-line pipeline: synth -> fit-gmm -> train -> predict -> evaluate.

Every command validates its flags, writes its resolved configuration next to
its outputs, and derives all randomness from --seed so identical invocations
reproduce identical files.  Exit codes: 0 success, 2 usage error, 1 runtime
error.  Per-slide work (EM fitting, prediction) runs on a thread pool sized
by --threads (or DPSURV_THREADS), with results reduced in input order.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import grfn
from .data_io import (
    CohortManifest,
    SynthSpec,
    generate_synthetic,
    load_model,
    load_patches,
    read_manifest,
    save_model,
)
from .evidence import (
    pst,
    relative_risk,
    risk_score,
    slide_evidence,
    summarizing_grfn,
    survival_function,
)
from .gmm import (
    PatchPrototypes,
    SlideEmbedding,
    assignment_map,
    em_fit,
    fit_patch_prototypes,
    slide_embedding,
)
from .grfn import GRFN, MixtureGRFN, UnattainableLevelError
from .metrics import (
    PredictionSet,
    UndefinedMetricError,
    bll_curve,
    brier_curve,
    c_index,
    calibration_coverage,
    km_censoring,
)
from .training import SurvivalRecord, TrainConfig, init_bank, train

DEFAULT_ALPHAS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


def _fmt(x: float) -> str:
    return repr(float(x))


def _thread_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("DPSURV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")
    }
    path = out_dir / f"{command}_config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _parse_patch_range(text: str) -> tuple[int, int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        return int(lo), int(hi)
    n = int(text)
    return n, n


def _kfold_test_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Deterministic fold of each subject's test membership; -1 when there
    is a single fold (no held-out split)."""
    if folds <= 1:
        return np.full(n, -1, dtype=np.int64)
    perm = np.random.default_rng([seed, 10]).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % folds
    return assignment


# ---------------------------------------------------------------------------
# embeddings file (JSON) written by fit-gmm, consumed by train/predict


def write_embeddings_file(
    path: Path,
    dim: int,
    protos: PatchPrototypes,
    slides: list[tuple[str, SlideEmbedding, int]],
) -> None:
    doc = {
        "dim": dim,
        "n_components": protos.count,
        "patch_prototypes": protos.means.tolist(),
        "slides": [
            {
                "subject_id": sid,
                "test_fold": int(fold),
                "weights": emb.weights.tolist(),
                "means": emb.means.tolist(),
                "variances": emb.variances.tolist(),
            }
            for sid, emb, fold in slides
        ],
    }
    path.write_text(json.dumps(doc) + "\n")


def read_embeddings_file(
    path: Path,
) -> tuple[PatchPrototypes, dict[str, SlideEmbedding], dict[str, int]]:
    doc = json.loads(Path(path).read_text())
    protos = PatchPrototypes(means=np.array(doc["patch_prototypes"], dtype=np.float64))
    embeddings: dict[str, SlideEmbedding] = {}
    folds: dict[str, int] = {}
    for item in doc["slides"]:
        embeddings[item["subject_id"]] = SlideEmbedding(
            weights=np.array(item["weights"], dtype=np.float64),
            means=np.array(item["means"], dtype=np.float64),
            variances=np.array(item["variances"], dtype=np.float64),
        )
        folds[item["subject_id"]] = int(item["test_fold"])
    return protos, embeddings, folds


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.risk_coeffs is None:
        coeffs = (
            np.linspace(-1.0, 1.0, args.components)
            if args.components > 1
            else np.zeros(1)
        )
    else:
        coeffs = np.array(_parse_float_list(args.risk_coeffs))
    spec = SynthSpec(
        n_subjects=args.n,
        dim=args.dim,
        n_components=args.components,
        patches_per_slide=_parse_patch_range(args.patches),
        risk_coeffs=tuple(float(c) for c in coeffs),
        noise_sd=args.noise_sd,
        censor_rate=args.censor_rate,
        seed=args.seed,
    )
    generate_synthetic(spec, out)
    _write_config(out, "synth", args)
    print(f"wrote {args.n} subjects to {out}")


# ---------------------------------------------------------------------------
# fit-gmm


def cmd_fit_gmm(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(args.manifest)
    n = len(manifest.entries)
    threads = _thread_count(args.threads)
    assignment = _kfold_test_assignment(n, args.folds, args.seed)
    patches = {
        e.subject_id: load_patches(manifest, e) for e in manifest.entries
    }

    shared_protos = None
    if args.shared_prototypes:
        shared_protos = _fit_pool_prototypes(
            [patches[e.subject_id] for e in manifest.entries], args, fold=-1
        )

    n_folds = max(1, args.folds)
    for fold in range(n_folds):
        fold_dir = out / f"fold_{fold}"
        (fold_dir / "assignments").mkdir(parents=True, exist_ok=True)
        if shared_protos is not None:
            protos = shared_protos
        else:
            train_patches = [
                patches[e.subject_id]
                for i, e in enumerate(manifest.entries)
                if assignment[i] != fold
            ]
            protos = _fit_pool_prototypes(train_patches, args, fold=fold)

        def fit_one(entry):
            lls: list[float] = []
            params = em_fit(
                patches[entry.subject_id],
                protos,
                max_iter=args.max_iter,
                tol=args.tol,
                callback=lls.append,
            )
            labels = assignment_map(patches[entry.subject_id], params)
            return slide_embedding(params), labels, lls

        results = _parallel_map(fit_one, manifest.entries, threads)
        slides = []
        log_lines = []
        for i, (entry, (emb, labels, lls)) in enumerate(zip(manifest.entries, results)):
            slides.append((entry.subject_id, emb, int(assignment[i])))
            with open(fold_dir / "assignments" / f"{entry.subject_id}.csv", "w") as fh:
                fh.write("patch_index,component\n")
                for p, lab in enumerate(labels):
                    fh.write(f"{p},{lab}\n")
            for it, ll in enumerate(lls):
                log_lines.append(f"{entry.subject_id},{it},{_fmt(ll)}")
        write_embeddings_file(fold_dir / "embeddings.json", manifest.dim, protos, slides)
        (fold_dir / "em_log.txt").write_text(
            "subject_id,iteration,log_likelihood\n" + "\n".join(log_lines) + "\n"
        )
    folds_doc = {
        "n_folds": n_folds,
        "test_fold": {
            e.subject_id: int(assignment[i]) for i, e in enumerate(manifest.entries)
        },
    }
    (out / "folds.json").write_text(json.dumps(folds_doc, indent=2) + "\n")
    _write_config(out, "fit_gmm", args)
    print(f"fitted {n} slides across {n_folds} fold(s) into {out}")


def _fit_pool_prototypes(
    patch_list: list[np.ndarray], args: argparse.Namespace, fold: int
) -> PatchPrototypes:
    pool = np.concatenate(patch_list, axis=0)
    if pool.shape[0] > args.sample_cap:
        rng = np.random.default_rng([args.seed, 11, fold + 1])
        pick = rng.choice(pool.shape[0], size=args.sample_cap, replace=False)
        pool = pool[np.sort(pick)]
    seed = int(np.random.SeedSequence([args.seed, 12, fold + 1]).generate_state(1)[0])
    return fit_patch_prototypes(pool, args.components, seed=seed)


# ---------------------------------------------------------------------------
# train


def _training_pairs(
    manifest: CohortManifest,
    embeddings: dict[str, SlideEmbedding],
    folds: dict[str, int],
    fold: int | None,
) -> list[tuple[SlideEmbedding, SurvivalRecord]]:
    pairs = []
    for entry in manifest.entries:
        if entry.subject_id not in embeddings:
            raise ValueError(f"no embedding for subject {entry.subject_id}")
        if fold is not None and folds.get(entry.subject_id, -1) == fold:
            continue
        pairs.append((embeddings[entry.subject_id], entry.record()))
    return pairs


def cmd_train(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protos, embeddings, folds = read_embeddings_file(Path(args.embeddings))
    manifest = read_manifest(args.manifest)
    pairs = _training_pairs(manifest, embeddings, folds, args.fold)
    if not pairs:
        raise ValueError("no training subjects selected")
    k = args.k
    n_protos = (
        int(k) if "," not in k else tuple(int(v) for v in k.split(","))
    )
    cfg = TrainConfig(
        alpha=args.alpha,
        xi=args.xi,
        rho=args.rho,
        bins=args.bins,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        tau=args.tau,
        n_prototypes=n_protos,
        weight_decay=args.wd,
    )
    val_pairs: list[tuple[SlideEmbedding, SurvivalRecord]] = []
    if args.val_fraction > 0.0 and len(pairs) > 1:
        rng = np.random.default_rng([args.seed, 13])
        perm = rng.permutation(len(pairs))
        n_val = max(1, int(round(args.val_fraction * len(pairs))))
        val_idx = set(perm[:n_val].tolist())
        val_pairs = [pairs[i] for i in sorted(val_idx)]
        pairs = [pairs[i] for i in range(len(pairs)) if i not in val_idx]
    bank0 = init_bank(pairs, cfg, lambda_mix=args.lambda_mix)
    bank, rows = train(pairs, val_pairs, cfg, lambda_mix=args.lambda_mix, init=bank0)
    save_model(out / "model.json", bank, protos, cfg)
    with open(out / "training_log.txt", "w") as fh:
        fh.write("epoch,train_loss,val_loss,wall_time\n")
        for row in rows:
            val = "" if row.val_loss is None else _fmt(row.val_loss)
            fh.write(f"{row.epoch},{_fmt(row.train_loss)},{val},{row.wall_time:.3f}\n")
    _write_config(out, "train", args)
    print(f"trained on {len(pairs)} subjects; model at {out / 'model.json'}")


# ---------------------------------------------------------------------------
# predict


def _select_entries(manifest, folds: dict[str, int], subjects: str, fold: int | None):
    if subjects == "all":
        return list(manifest.entries)
    if fold is None:
        raise ValueError(f"--fold is required with --subjects {subjects}")
    if subjects == "test":
        return [e for e in manifest.entries if folds.get(e.subject_id, -1) == fold]
    return [e for e in manifest.entries if folds.get(e.subject_id, -1) != fold]


def cmd_predict(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank, _, _ = load_model(args.model)
    _, embeddings, folds = read_embeddings_file(Path(args.embeddings))
    manifest = read_manifest(args.manifest)
    entries = _select_entries(manifest, folds, args.subjects, args.fold)
    if not entries:
        raise ValueError("no subjects selected")
    lam = bank.lambda_mix if args.lambda_mix is None else args.lambda_mix
    alphas = _parse_float_list(args.alphas)
    if args.times == "auto":
        obs = np.array([e.time for e in entries])
        times = (
            np.geomspace(obs.min(), obs.max(), 9)
            if obs.min() < obs.max()
            else np.array([obs.min()])
        )
    else:
        times = np.array(_parse_float_list(args.times))

    n_comp = bank.n_components
    header = ["subject_id", "risk", "pst", "lambda"]
    header += [f"pi_{c}" for c in range(n_comp)]
    header += [f"mu_{c}" for c in range(n_comp)]
    header += [f"sigma2_{c}" for c in range(n_comp)]
    header += [f"h_{c}" for c in range(n_comp)]
    header += [f"r_{c}" for c in range(n_comp)]
    header += [f"S@{t:.6g}" for t in times]
    for a in alphas:
        header += [f"bpi_lo@{a:g}", f"bpi_hi@{a:g}", f"ppi_lo@{a:g}", f"ppi_hi@{a:g}"]

    def predict_one(entry):
        emb = embeddings[entry.subject_id]
        mixture = slide_evidence(emb, bank)
        pooled = summarizing_grfn(mixture)
        row = [
            entry.subject_id,
            _fmt(risk_score(mixture)),
            _fmt(pst(pooled)),
            _fmt(lam),
        ]
        row += [_fmt(w) for w in mixture.weights]
        row += [_fmt(g.mu) for g in mixture.components]
        row += [_fmt(g.sigma2) for g in mixture.components]
        row += [_fmt(g.h) for g in mixture.components]
        row += [_fmt(r) for r in relative_risk(mixture)]
        row += [_fmt(survival_function(mixture, float(t), lam)) for t in times]
        for a in alphas:
            try:
                b = grfn.bpi(pooled, a)
                row += [_fmt(math.exp(b.lo)), _fmt(math.exp(b.hi))]
            except UnattainableLevelError:
                row += ["NA", "NA"]
            p = grfn.ppi(pooled, a)
            row += [_fmt(math.exp(p.lo)), _fmt(math.exp(p.hi))]
        return row

    rows = _parallel_map(predict_one, entries, _thread_count(args.threads))
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    _write_config(out, "predict", args)
    print(f"wrote {len(rows)} predictions to {out / 'predictions.csv'}")


# ---------------------------------------------------------------------------
# evaluate


def _read_predictions(paths: list[str]) -> tuple[list[str], list[float], list[MixtureGRFN], float]:
    ids: list[str] = []
    risks: list[float] = []
    mixtures: list[MixtureGRFN] = []
    lam: float | None = None
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            n_comp = sum(1 for f in fields if f.startswith("pi_"))
            if n_comp == 0:
                raise ValueError(f"{path}: no mixture columns found")
            for row in reader:
                ids.append(row["subject_id"])
                risks.append(float(row["risk"]))
                row_lam = float(row["lambda"])
                if lam is None:
                    lam = row_lam
                elif abs(lam - row_lam) > 1e-12:
                    raise ValueError("prediction files disagree on lambda")
                weights = [float(row[f"pi_{c}"]) for c in range(n_comp)]
                comps = [
                    GRFN(
                        float(row[f"mu_{c}"]),
                        float(row[f"sigma2_{c}"]),
                        float(row[f"h_{c}"]),
                    )
                    for c in range(n_comp)
                ]
                total = sum(weights)
                mixtures.append(MixtureGRFN([w / total for w in weights], comps))
    if lam is None:
        raise ValueError("no prediction rows found")
    return ids, risks, mixtures, lam


def cmd_evaluate(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids, risks, mixtures, lam = _read_predictions(args.predictions)
    manifest = read_manifest(args.manifest)
    by_id = {e.subject_id: e for e in manifest.entries}
    missing = [s for s in ids if s not in by_id]
    if missing:
        raise ValueError(f"subjects missing from manifest: {missing[:5]}")
    records = [by_id[s].record() for s in ids]
    preds = PredictionSet(records, risks, mixtures, lam)
    censor_surv = km_censoring(records)

    rows = []
    try:
        rows.append(("c_index", _fmt(c_index(preds)), len(preds), 0, ""))
    except UndefinedMetricError as exc:
        rows.append(("c_index", "NA", len(preds), 0, str(exc)))
    event_times = [r.time for r in records if not r.censored]
    if event_times:
        t_lo = min(event_times) if args.t_lo is None else args.t_lo
        t_hi = max(r.time for r in records) if args.t_hi is None else args.t_hi
        ts = np.linspace(t_lo, t_hi, args.n_grid)
        try:
            bs_vals, bs_drop = brier_curve(preds, censor_surv, ts)
            ibs_val = float(np.trapezoid(bs_vals, ts) / (t_hi - t_lo))
            rows.append(("ibs", _fmt(ibs_val), len(preds), int(bs_drop.max()), ""))
            bll_vals, bll_drop = bll_curve(preds, censor_surv, ts)
            ibll_val = float(-np.trapezoid(bll_vals, ts) / (t_hi - t_lo))
            rows.append(("ibll", _fmt(ibll_val), len(preds), int(bll_drop.max()), ""))
        except UndefinedMetricError as exc:
            rows.append(("ibs", "NA", len(preds), len(preds), str(exc)))
            rows.append(("ibll", "NA", len(preds), len(preds), str(exc)))
    else:
        rows.append(("ibs", "NA", len(preds), 0, "no events"))
        rows.append(("ibll", "NA", len(preds), 0, "no events"))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value", "n", "dropped", "note"])
        writer.writerows(rows)

    alphas = _parse_float_list(args.alphas)
    try:
        bpi_cov = calibration_coverage(preds, alphas, "bpi")
        ppi_cov = calibration_coverage(preds, alphas, "ppi")
        with open(out / "calibration.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "alpha",
                    "bpi_coverage",
                    "ppi_coverage",
                    "n_uncensored",
                    "n_bpi_unattainable",
                ]
            )
            for i, a in enumerate(alphas):
                writer.writerow(
                    [
                        f"{a:g}",
                        _fmt(bpi_cov.coverage[i]),
                        _fmt(ppi_cov.coverage[i]),
                        bpi_cov.n_uncensored,
                        int(bpi_cov.n_unattainable[i]),
                    ]
                )
    except UndefinedMetricError as exc:
        (out / "calibration.csv").write_text(
            "alpha,bpi_coverage,ppi_coverage,n_uncensored,n_bpi_unattainable\n"
            f"# undefined: {exc}\n"
        )
    _write_config(out, "evaluate", args)
    print(f"metrics written to {out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpsurv",
        description="Evidential survival analysis pipeline on feature-vector inputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--patches", default="128", help="patches per slide, N or LO:HI")
    p.add_argument("--censor-rate", type=float, default=0.25)
    p.add_argument("--noise-sd", type=float, default=0.3)
    p.add_argument("--risk-coeffs", default=None, help="comma list, default linspace(-1,1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-gmm", help="fit patch prototypes and per-slide mixtures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=16)
    p.add_argument("--sample-cap", type=int, default=100000)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument(
        "--shared-prototypes",
        action="store_true",
        help="fit prototypes once on all subjects instead of per training fold",
    )
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("train", help="fit the prototype bank")
    p.add_argument("--embeddings", required=True, help="embeddings.json from fit-gmm")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=None, help="exclude this test fold")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--wd", type=float, default=2e-4)
    p.add_argument("--xi", type=float, default=0.01)
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--lambda", dest="lambda_mix", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--k", default="2", help="prototypes per component, N or comma list")
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-subject predictions CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", choices=["all", "train", "test"], default="all")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--times", default="auto", help="comma list of times or 'auto'")
    p.add_argument("--alphas", default=DEFAULT_ALPHAS)
    p.add_argument("--lambda", dest="lambda_mix", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="discrimination and calibration metrics")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default=DEFAULT_ALPHAS)
    p.add_argument("--n-grid", type=int, default=100)
    p.add_argument("--t-lo", type=float, default=None)
    p.add_argument("--t-hi", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"dpsurv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
