"""Command-line front end.

Subcommands: ``simulate`` (synthetic cohorts), ``prior-probs`` (prior
pattern tables), ``fit`` (MCMC), ``summarize`` / ``score`` /
``treatment-effects`` (posterior reports).  Exit codes: 0 success,
2 configuration error, 3 data error, 4 runtime abort (partial results
are still written).  ``PANELSTATE_LOG`` sets the log level; timestamps
honor ``SOURCE_DATE_EPOCH`` so repeated seeded runs are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import time
from importlib import metadata as importlib_metadata
from pathlib import Path

import click
import numpy as np

from . import reports, simulate as simulate_mod
from .config import ConfigError, RunConfig, config_fingerprint, load_config
from .model_core import DataError, load_dataset, write_dataset
from .particle_filter import FilterDegenerateError, estimate_prior_patterns
from .sampler import (ChainAbort, McmcSettings, RngStream, ROLE_GTABLE,
                      run_chains, write_run_stores)

log = logging.getLogger("panelstate")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ABORT = 4


def _setup_logging():
    level = os.environ.get("PANELSTATE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_version() -> str:
    try:
        version = importlib_metadata.version("panelstate")
    except importlib_metadata.PackageNotFoundError:
        version = "unversioned"
    try:
        describe = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if describe.returncode == 0:
            return f"{version}+{describe.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def _write_json_atomic(path: Path, payload: dict):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _fmt(v) -> str:
    return repr(float(v))


class _Fail(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _guard(func):
    """Map library errors onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as exc:
            raise _Fail(f"config error: {exc}", EXIT_CONFIG) from exc
        except DataError as exc:
            raise _Fail(f"data error: {exc}", EXIT_DATA) from exc
        except (ChainAbort, FilterDegenerateError) as exc:
            raise _Fail(f"runtime abort: {exc}", EXIT_ABORT) from exc

    wrapper.__name__ = func.__name__
    wrapper.__doc__ = func.__doc__
    return wrapper


@click.group()
def main():
    """Clustering of unaligned binary longitudinal time series."""
    _setup_logging()


@main.command()
@click.option("--scenario", type=click.Path(), default=None,
              help="Scenario JSON; omit for the default cohort.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_guard
def simulate(scenario, out_dir, seed):
    """Generate a synthetic cohort with known truth."""
    doc = {}
    if scenario is not None:
        path = Path(scenario)
        if not path.exists():
            raise ConfigError(f"scenario file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    doc["seed"] = seed
    known = {f.name for f in dataclasses.fields(simulate_mod.ScenarioConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "base_probs" in doc:
        doc["base_probs"] = tuple(tuple(tuple(inner) for inner in mid)
                                  for mid in doc["base_probs"])
    if "clump_len_range" in doc:
        doc["clump_len_range"] = tuple(doc["clump_len_range"])
    try:
        cfg = simulate_mod.ScenarioConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    dataset, truths = simulate_mod.generate_cohort(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    simulate_mod.write_truth(truths, out / "truth.csv")
    _write_json_atomic(out / "meta.json", {
        "command": "simulate", "seed": seed,
        "scenario": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in dataclasses.asdict(cfg).items()},
        "created": _now(), "version": _build_version(),
    })
    click.echo(f"wrote {len(dataset)} subjects to {out}")


@main.command(name="prior-probs")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--draws", type=int, default=None, help="Prior draws per subject.")
@_guard
def prior_probs(data_dir, config_path, out_dir, seed, draws):
    """Estimate each subject's prior pattern probabilities."""
    run_config = load_config(config_path)
    dataset = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_draws = draws or run_config.model.prior_mc_draws
    root = RngStream(seed)
    with open(out / "g_probs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "pattern", "probability"])
        for idx, rec in enumerate(dataset):
            table = estimate_prior_patterns(rec, run_config.model, n_draws,
                                            root.substream(ROLE_GTABLE, idx),
                                            run_config.encoder)
            for ell, prob in enumerate(table.probs):
                w.writerow([rec.id, ell, _fmt(prob)])
    _write_json_atomic(out / "meta.json", {
        "command": "prior-probs", "seed": seed, "draws": n_draws,
        "created": _now(), "version": _build_version(),
    })
    click.echo(f"wrote {out / 'g_probs.csv'}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--chains", type=int, default=None, help="Number of chains.")
@click.option("--seed", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--particles", type=int, default=None)
@click.option("--sequential", is_flag=True,
              help="Generate proposals strictly one subject at a time.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker threads for within-chain proposal generation.")
@click.option("--snapshots/--no-snapshots", default=None,
              help="Retain sparse latent-trajectory snapshots.")
@click.option("--force", is_flag=True, help="Overwrite an existing run directory.")
@_guard
def fit(data_dir, config_path, out_dir, chains, seed, iters, burnin, thin,
        particles, sequential, threads, snapshots, force):
    """Run the MCMC sampler and store the chains."""
    run_config = load_config(config_path)
    mcmc = run_config.mcmc
    overrides = dict(n_chains=chains, n_iter=iters, burn_in=burnin, thin=thin, seed=seed)
    fields = {k: (v if v is not None else getattr(mcmc, k)) for k, v in overrides.items()}
    try:
        settings = McmcSettings(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = run_config.model
    if particles is not None:
        model = dataclasses.replace(model, n_particles=particles)
    collect = run_config.snapshots_enabled if snapshots is None else snapshots
    dataset = load_dataset(data_dir)

    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"run directory {out} exists; pass --force to overwrite")
        for item in sorted(out.rglob("*"), reverse=True):
            item.unlink() if item.is_file() else item.rmdir()
    out.mkdir(parents=True, exist_ok=True)

    fingerprint = config_fingerprint(
        RunConfig(model=model, mcmc=settings, thresholds=run_config.thresholds,
                  encoder=run_config.encoder, snapshots_enabled=collect,
                  snapshot_stride=run_config.snapshot_stride))
    manifest = {
        "command": "fit",
        "status": "running",
        "seed": settings.seed,
        "settings": {"n_chains": settings.n_chains, "n_iter": settings.n_iter,
                     "burn_in": settings.burn_in, "thin": settings.thin,
                     "threads": threads, "sequential": bool(sequential)},
        "config": fingerprint,
        "config_hash": hashlib.sha256(
            json.dumps(fingerprint, sort_keys=True).encode()).hexdigest(),
        "data_dir": str(Path(data_dir).resolve()),
        "input_digests": {name: _sha256(Path(data_dir) / name)
                          for name in ("observations.csv", "baseline.csv")},
        "n_patterns": run_config.encoder.n_patterns,
        "version": _build_version(),
        "lib_versions": {m: importlib_metadata.version(m)
                         for m in ("numpy", "scipy", "numba")},
        "start_time": _now(),
    }
    _write_json_atomic(out / "meta.json", manifest)

    workers = 1 if sequential else min(settings.n_chains, os.cpu_count() or 1)
    threads = 1 if sequential else threads
    status = "complete"
    try:
        stores = run_chains(dataset, model, settings, encoder=run_config.encoder,
                            collect_theta=collect,
                            snapshot_stride=run_config.snapshot_stride,
                            threads=threads, workers=workers)
    except ChainAbort as exc:
        stores = getattr(exc, "stores", None) or [exc.partial]
        status = "aborted"
        manifest["abort_reason"] = str(exc)
    if stores:
        write_run_stores(stores, out)
    manifest.update({
        "status": status,
        "end_time": _now(),
        "draws_per_chain": [s.n_retained for s in stores],
        "snapshot_draws": stores[0].snapshot_draws if stores else [],
        "patients": stores[0].patient_ids if stores else [],
        "diagnostics": [
            {"chain": s.chain_id,
             "acceptance_rate": [float(a) / max(s.n_sweeps, 1) for a in s.acceptance],
             **s.diagnostics}
            for s in stores],
    })
    _write_json_atomic(out / "meta.json", manifest)
    if status == "aborted":
        raise ChainAbort(manifest.get("abort_reason", "chain aborted"),
                         stores[0] if stores else None)
    click.echo(f"wrote {sum(s.n_retained for s in stores)} retained draws to {out}")


@main.command()
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--loss", type=click.Choice(["binder", "vi"]), default="binder",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guard
def summarize(run_dir, loss, out_dir):
    """Pattern posteriors, similarity matrix, partition estimate, diagnostics."""
    run = reports.load_run(Path(run_dir))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    L = run.n_patterns
    post = reports.pattern_posterior(run.patterns, L)
    with open(out / "pattern_posterior.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id"] + [f"p{ell}" for ell in range(L)])
        for pid, row in zip(run.patient_ids, post):
            w.writerow([pid] + [_fmt(v) for v in row])

    sim = reports.similarity(run.labels)
    with open(out / "similarity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id"] + run.patient_ids)
        for pid, row in zip(run.patient_ids, sim):
            w.writerow([pid] + [_fmt(v) for v in row])

    part = reports.point_partition(sim, run.labels, loss=loss)
    with open(out / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "label"])
        for pid, lab in zip(run.patient_ids, part):
            w.writerow([pid, int(lab)])

    xi = reports.xi_posterior_mean(run.labels, run.atoms)
    with open(out / "xi_posterior_mean.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id"] + [f"xi{ell}" for ell in range(xi.shape[1])])
        for pid, row in zip(run.patient_ids, xi):
            w.writerow([pid] + [_fmt(v) for v in row])

    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "name", "value"])
        for entry in run.meta.get("diagnostics", []):
            chain = entry.get("chain", 0)
            for pid, rate in zip(run.patient_ids, entry.get("acceptance_rate", [])):
                w.writerow(["acceptance_rate", f"chain{chain}:{pid}", _fmt(rate)])
            for key in ("n_low_ess", "fallback_allocations", "max_occupied"):
                if key in entry:
                    w.writerow([key, f"chain{chain}", entry[key]])
        splits = np.cumsum(run.draws_per_chain)[:-1]
        for j, name in enumerate(run.covariate_names):
            chains = np.split(run.delta[:, j], splits) if len(run.draws_per_chain) > 1 \
                else [run.delta[:, j]]
            w.writerow(["rhat_delta", name, _fmt(reports.split_rhat(chains))])
    click.echo(f"wrote summaries to {out}")


@main.command()
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--truth", "truth_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Defaults to the run directory.")
@_guard
def score(run_dir, truth_path, out_dir):
    """Cross-entropy of the pattern posterior against known truth."""
    run = reports.load_run(Path(run_dir))
    try:
        truth_map = simulate_mod.read_truth(truth_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    missing = [pid for pid in run.patient_ids if pid not in truth_map]
    if missing:
        raise DataError(f"truth table lacks patients {missing[:5]}")
    truth = np.array([truth_map[pid] for pid in run.patient_ids])
    if truth.min() < 0 or truth.max() >= run.n_patterns:
        raise DataError(f"truth patterns must lie in 0..{run.n_patterns - 1}, "
                        f"got {truth.min()}..{truth.max()}")
    post = reports.pattern_posterior(run.patterns, run.n_patterns)
    h = reports.cross_entropy(post, truth, run.n_draws)
    out = Path(out_dir) if out_dir else Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"cross_entropy {_fmt(h)}"]
    for ell in sorted(set(truth.tolist())):
        mask = truth == ell
        h_ell = reports.cross_entropy(post[mask], truth[mask], run.n_draws)
        lines.append(f"cross_entropy_pattern{ell} {_fmt(h_ell)}")
    (out / "cross_entropy.txt").write_text("\n".join(lines) + "\n")
    click.echo(lines[0])


@main.command(name="treatment-effects")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), default=None,
              help="Defaults to the data directory recorded in the run.")
@click.option("--loss", type=click.Choice(["binder", "vi"]), default="binder",
              show_default=True)
@_guard
def treatment_effects(run_dir, out_dir, data_dir, loss):
    """Per-treatment slice summaries from trajectory snapshots."""
    run = reports.load_run(Path(run_dir))
    data_dir = data_dir or run.meta.get("data_dir")
    if not data_dir:
        raise DataError("no data directory recorded in the run; pass --data")
    dataset = load_dataset(data_dir)
    if not run.theta:
        raise DataError("run has no trajectory snapshots; refit with --snapshots")
    sim = reports.similarity(run.labels)
    part = reports.point_partition(sim, run.labels, loss=loss)
    rows = reports.treatment_effects(dataset, run, cluster_labels=part)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "treatment_effects.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(reports.TREATMENT_EFFECT_COLUMNS)
        for row in rows:
            w.writerow([row["group"], row["treatment"]] +
                       [_fmt(row[c]) for c in reports.TREATMENT_EFFECT_COLUMNS[2:8]] +
                       [row["n_slices"], row["n_excluded"]])
    click.echo(f"wrote {out / 'treatment_effects.csv'}")


if __name__ == "__main__":
    main()
