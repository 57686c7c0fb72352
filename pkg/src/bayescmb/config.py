"""TOML run configuration.

Every key has a default; unknown sections or keys are rejected.  Each
default carries a short provenance note, shown by ``bayescmb --help`` and
``bayescmb defaults``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .skysim import BANDS_GHZ, SimConfig
from .training import TrainConfig
from .unet import UNetConfig

_SIM = SimConfig()

# section -> key -> (default, note)
SCHEMA: dict[str, dict[str, tuple]] = {
    "resolution": {
        "nside": (64, "published resolution"),
    },
    "bands": {
        "freqs_ghz": (list(BANDS_GHZ), "the nine published frequency bands"),
        "noise_sigma_uk": (list(_SIM.noise_sigma), "synthetic, sensitivity-shaped (lowest near 143 GHz)"),
    },
    "simulation": {
        "fwhm_arcmin": (150.0, "published common beam"),
        "noise_modulation": (0.5, "synthetic: m(p) = 1 + a |cos theta|"),
        "fg_amplitude": (200.0, "synthetic equatorial foreground amplitude at the pivot (uK)"),
        "fg_width_deg": (15.0, "synthetic equatorial band width"),
        "fg_spectral_index": (2.0, "synthetic power-law index"),
        "fg_index_variation": (0.0, "rms of a fixed spectral-index pattern (0 = uniform)"),
        "fg_pivot_ghz": (100.0, "power-law pivot frequency"),
        "fg_pattern_amplitude": (0.5, "contrast of the fixed large-scale foreground pattern"),
        "fg_pattern_lmax": (8, "band limit of the large-scale patterns"),
        "fg_instance_modulation": (0.10, "per-instance multiplicative foreground perturbation"),
        "cmb_spectrum": ("placeholder", "'placeholder' or a path to an ell,C_ell CSV"),
        "foreground_file": ("", "optional 9-channel .hmap replacing the synthetic foreground"),
        "split": ([0.8, 0.1, 0.1], "published train/validation/test fractions"),
    },
    "architecture": {
        "depth": (3, "pooling levels"),
        "widths": ([32, 64, 128], "channels per level"),
        "K": (3, "Chebyshev order"),
        "weighted_graph": (True, "Gaussian edge weights (false = unit weights)"),
        "p_init": (1e-3, "published initial dropout probability"),
        "temperature": (0.1, "concrete relaxation temperature"),
    },
    "training": {
        "deterministic_epochs": (200, "epoch budget (published runs stopped near 190)"),
        "bayesian_epochs": (200, "epoch budget (published runs stopped near 190)"),
        "deterministic_lr": (1e-3, "published SGD learning rate"),
        "bayesian_lr": (1e-5, "published Adam learning rate"),
        "deterministic_batch": (10, "published batch size"),
        "bayesian_batch": (7, "published batch size"),
        "length_scale": (1e-4, "published prior length scale"),
        "weight_val": (0.8, "published selection weight on validation loss"),
        "weight_train": (0.2, "published selection weight on training loss"),
        "patience": (25, "early stop after this many epochs without improvement"),
        "logvar_init_std": (1e-3, "published N(0, 1e-6) variance-head init"),
        "seed": (0, "training seed"),
    },
    "inference": {
        "T": (50, "Monte Carlo dropout samples"),
    },
    "evaluation": {
        "cut_deg": (30.0, "published +-30 degree sky cut"),
        "lmax": (0, "spectrum band limit (0 = 2 * nside)"),
        "ilc_mask": (False, "compute ILC covariance over the cut instead of the full sky"),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: v[0] for k, v in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section, keys in d.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(keys, dict):
                raise ConfigError(f"[{section}] must be a table")
            for k, v in keys.items():
                if k not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {k!r} in [{section}]")
                cfg.values[section][k] = _coerce(section, k, v)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self):
        try:
            self.sim_config()
            self.unet_config()
            self.train_config("deterministic")
            self.train_config("bayesian")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self["inference"]["T"] < 2:
            raise ConfigError("inference.T must be at least 2")
        if not 0 <= self["evaluation"]["cut_deg"] < 90:
            raise ConfigError("evaluation.cut_deg must be in [0, 90)")

    # -- views -----------------------------------------------------------------

    def sim_config(self) -> SimConfig:
        s = self["simulation"]
        return SimConfig(
            nside=self["resolution"]["nside"],
            bands_ghz=tuple(self["bands"]["freqs_ghz"]),
            noise_sigma=tuple(self["bands"]["noise_sigma_uk"]),
            **{k: (tuple(v) if isinstance(v, list) else v) for k, v in s.items()},
        )

    def unet_config(self, bayesian: bool = False) -> UNetConfig:
        a = self["architecture"]
        return UNetConfig(nside=self["resolution"]["nside"], depth=a["depth"], widths=tuple(a["widths"]),
                          K=a["K"], bayesian=bayesian, weighted_graph=a["weighted_graph"],
                          p_init=a["p_init"], temperature=a["temperature"])

    def train_config(self, stage: str) -> TrainConfig:
        t = self["training"]
        common = dict(length_scale=t["length_scale"], weight_val=t["weight_val"],
                      weight_train=t["weight_train"], patience=t["patience"], seed=t["seed"])
        if stage == "deterministic":
            return TrainConfig.deterministic(epochs=t["deterministic_epochs"], lr=t["deterministic_lr"],
                                             batch_size=t["deterministic_batch"], **common)
        if stage == "bayesian":
            return TrainConfig.bayesian(epochs=t["bayesian_epochs"], lr=t["bayesian_lr"],
                                        batch_size=t["bayesian_batch"], **common)
        raise ConfigError(f"unknown stage {stage!r}")

    def spectrum_lmax(self) -> int:
        return self["evaluation"]["lmax"] or 2 * self["resolution"]["nside"]

    def to_toml(self, notes: bool = True) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for k, (_, note) in keys.items():
                line = f"{k} = {_toml_value(self.values[section][k])}"
                lines.append(f"{line:<48} # {note}" if notes else line)
            lines.append("")
        return "\n".join(lines)


def _coerce(section, key, value):
    default = SCHEMA[section][key][0]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, list) and isinstance(value, list):
        return list(value)
    raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def defaults_text() -> str:
    return RunConfig().to_toml(notes=True)
