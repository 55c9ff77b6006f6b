"""Config file loading, defaults, and validation.

A run is configured by one JSON document mirroring the model fields.
Matrices may be given as row-major nested arrays or by the preset name
``"appendix_b_default"``; anything unspecified falls back to the default
twelve-dimensional state model, the capped Pitman-Yor prior, and the
standard chain protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventThresholds, MeanLevelEncoder, PatternEncoder, ThreeEventEncoder
from .model_core import ModelConfig
from .sampler import McmcSettings

__all__ = ["ConfigError", "RunConfig", "load_config", "default_state_matrices",
           "DEFAULT_STATE_DIM"]

DEFAULT_STATE_DIM = 12
PRESET_NAME = "appendix_b_default"


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def default_state_matrices(p: int = DEFAULT_STATE_DIM) -> dict[str, np.ndarray]:
    """Default latent-state matrices for the daily risk model.

    Components: a slowly drifting level, a days-under-treatment slope,
    and a lag chain of short-lived innovations feeding the dynamic
    intercept.  The change-day transition collapses the state to the
    average of its components and re-disperses it with the initial
    covariance.
    """
    if p < 1:
        raise ConfigError("state dimension p must be >= 1")
    G = np.zeros((p, p))
    for j in range(min(2, p)):
        G[j, j] = 1.0
    for j in range(3, p):
        G[j, j - 1] = 1.0
    W = np.full(p, 1e-4)
    W[0] = 1e-3 / 3.0
    if p >= 2:
        W[1] = 1e-3 / 365.0 ** 2
    if p >= 3:
        W[2] = 1e-2
    S0 = np.full(p, 1e-2)
    S0[0] = 1e-4
    if p >= 2:
        S0[1] = 1e-4
    G_star = np.zeros((p, p))
    G_star[0, :] = 1.0 / p
    return {"G": G, "W": np.diag(W), "G_star": G_star, "S0": np.diag(S0),
            "m0": np.zeros(p)}


@dataclass
class RunConfig:
    model: ModelConfig
    mcmc: McmcSettings
    thresholds: EventThresholds
    encoder: PatternEncoder
    snapshots_enabled: bool = False
    snapshot_stride: int = 10
    raw: dict | None = None


_MODEL_KEYS = {"p", "G", "W", "G_star", "S0", "m0", "M", "sigma", "L", "dirichlet_a",
               "n_particles", "prior_mc_draws", "delta_prior_mean", "delta_prior_cov",
               "missing_propagation"}
_TOP_KEYS = _MODEL_KEYS | {"events", "pattern_encoder", "mcmc", "snapshots"}
_EVENT_KEYS = {"r1_mean_cut", "r2_high_cut", "r2_risk_cut", "r2_ratio_cut", "r3_window"}
_MCMC_KEYS = {"n_chains", "n_iter", "burn_in", "thin", "seed"}


def _matrix(doc: dict, key: str, preset: dict, p: int, vector: bool = False):
    value = doc.get(key)
    if value is None or value == PRESET_NAME:
        return preset[key]
    arr = np.array(value, dtype=float)
    want = (p,) if vector else (p, p)
    if arr.shape != want:
        raise ConfigError(f"{key}: expected shape {want}, got {arr.shape}")
    return arr


def load_config(source: str | Path | dict | None) -> RunConfig:
    """Load and validate a configuration document (path, dict, or None).

    Every invariant is checked here with a named-field error message, so
    a bad config never reaches the samplers.
    """
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = dict(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")

    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    p = int(doc.get("p", DEFAULT_STATE_DIM))
    preset = default_state_matrices(p)
    try:
        kwargs = dict(
            p=p,
            G=_matrix(doc, "G", preset, p),
            W=_matrix(doc, "W", preset, p),
            G_star=_matrix(doc, "G_star", preset, p),
            S0=_matrix(doc, "S0", preset, p),
            m0=_matrix(doc, "m0", preset, p, vector=True),
        )
        for key in ("M", "sigma", "n_particles", "prior_mc_draws", "missing_propagation"):
            if key in doc:
                kwargs[key] = doc[key]
        if "L" in doc:
            kwargs["L"] = int(doc["L"])
        if "dirichlet_a" in doc:
            a = doc["dirichlet_a"]
            L = kwargs.get("L", 8)
            kwargs["dirichlet_a"] = np.full(L, float(a)) if np.isscalar(a) else np.array(a, float)
        if "delta_prior_mean" in doc:
            kwargs["delta_prior_mean"] = np.array(doc["delta_prior_mean"], dtype=float)
        if "delta_prior_cov" in doc:
            cov = doc["delta_prior_cov"]
            if np.isscalar(cov):
                raise ConfigError("delta_prior_cov must be a matrix (nested arrays)")
            kwargs["delta_prior_cov"] = np.array(cov, dtype=float)
        model = ModelConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    events_doc = doc.get("events", {})
    unknown = set(events_doc) - _EVENT_KEYS
    if unknown:
        raise ConfigError(f"unknown events keys: {sorted(unknown)}")
    try:
        thresholds = EventThresholds(**events_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"events: {exc}") from exc

    enc_doc = doc.get("pattern_encoder", {"type": "three_event"})
    enc_type = enc_doc.get("type", "three_event")
    if enc_type == "three_event":
        encoder: PatternEncoder = ThreeEventEncoder(thresholds)
    elif enc_type == "mean_level":
        if "cut" not in enc_doc:
            raise ConfigError("pattern_encoder of type mean_level needs a 'cut'")
        encoder = MeanLevelEncoder(float(enc_doc["cut"]))
    else:
        raise ConfigError(f"unknown pattern_encoder type {enc_type!r}")
    if encoder.n_patterns != model.L:
        raise ConfigError(f"L={model.L} does not match the pattern encoder's "
                          f"{encoder.n_patterns} patterns")

    mcmc_doc = doc.get("mcmc", {})
    unknown = set(mcmc_doc) - _MCMC_KEYS
    if unknown:
        raise ConfigError(f"unknown mcmc keys: {sorted(unknown)}")
    try:
        mcmc = McmcSettings(**{k: int(v) for k, v in mcmc_doc.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"mcmc: {exc}") from exc

    snaps = doc.get("snapshots", {})
    if set(snaps) - {"enabled", "stride"}:
        raise ConfigError(f"unknown snapshots keys: {sorted(set(snaps) - {'enabled', 'stride'})}")
    stride = int(snaps.get("stride", 10))
    if stride < 1:
        raise ConfigError("snapshots.stride must be >= 1")

    return RunConfig(model=model, mcmc=mcmc, thresholds=thresholds, encoder=encoder,
                     snapshots_enabled=bool(snaps.get("enabled", False)),
                     snapshot_stride=stride, raw=doc)


def config_fingerprint(run_config: RunConfig) -> dict:
    """JSON-ready echo of the resolved configuration."""
    m = run_config.model
    enc = run_config.encoder
    enc_doc = {"type": "three_event"}
    if isinstance(enc, MeanLevelEncoder):
        enc_doc = {"type": "mean_level", "cut": enc.mean_cut}
    th = run_config.thresholds
    return {
        "p": m.p,
        "G": m.G.tolist(), "W": m.W.tolist(), "G_star": m.G_star.tolist(),
        "S0": m.S0.tolist(), "m0": m.m0.tolist(),
        "M": m.M, "sigma": m.sigma, "L": m.L,
        "dirichlet_a": m.dirichlet_a.tolist(),
        "n_particles": m.n_particles, "prior_mc_draws": m.prior_mc_draws,
        "missing_propagation": m.missing_propagation,
        "delta_prior_mean": None if m.delta_prior_mean is None else m.delta_prior_mean.tolist(),
        "delta_prior_cov": None if m.delta_prior_cov is None else m.delta_prior_cov.tolist(),
        "events": {"r1_mean_cut": th.r1_mean_cut, "r2_high_cut": th.r2_high_cut,
                   "r2_risk_cut": th.r2_risk_cut, "r2_ratio_cut": th.r2_ratio_cut,
                   "r3_window": th.r3_window},
        "pattern_encoder": enc_doc,
        "mcmc": {"n_chains": run_config.mcmc.n_chains, "n_iter": run_config.mcmc.n_iter,
                 "burn_in": run_config.mcmc.burn_in, "thin": run_config.mcmc.thin,
                 "seed": run_config.mcmc.seed},
        "snapshots": {"enabled": run_config.snapshots_enabled,
                      "stride": run_config.snapshot_stride},
    }
