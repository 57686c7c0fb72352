"""Simulated multi-frequency observations ``x = C + F + N`` with clean CMB targets.

Foregrounds are synthetic: an equatorial-band amplitude profile times a
fixed large-scale random pattern, scaled across frequency by a power law.
Every instance perturbs the fixed foreground with its own mild large-scale
multiplicative modulation.  Noise is white, spatially modulated, and fresh
per instance.  All constants are labelled synthetic and config-exposed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import harmonics as hm
from .healpix import Resolution, SkyMap, as_resolution, pixel_angles

BANDS_GHZ = (30, 44, 70, 100, 143, 217, 353, 545, 857)

# stream tags for derived seeds
_CMB, _NOISE, _FG_FIXED, _FG_MOD, _SPLIT, _FG_INDEX = 1, 2, 3, 4, 5, 6


@dataclass(frozen=True)
class BandSpec:
    freq_ghz: float
    noise_sigma: float  # uK per pixel


@dataclass(frozen=True)
class SimConfig:
    """Simulation constants (synthetic where the source data are unavailable)."""

    nside: int = 64
    fwhm_arcmin: float = 150.0
    bands_ghz: tuple = BANDS_GHZ
    # uK per pixel; CMB-sensitivity shaped, lowest near 143 GHz
    noise_sigma: tuple = (12.0, 10.0, 8.0, 5.0, 4.0, 5.0, 10.0, 25.0, 60.0)
    noise_modulation: float = 0.5  # m(p) = 1 + noise_modulation * |cos theta|
    fg_amplitude: float = 200.0  # uK at 100 GHz on the equator
    fg_width_deg: float = 15.0
    fg_spectral_index: float = 2.0
    fg_pivot_ghz: float = 100.0
    fg_index_variation: float = 0.0  # rms of a fixed large-scale spectral-index pattern
    fg_pattern_amplitude: float = 0.5  # contrast of the fixed large-scale pattern
    fg_pattern_lmax: int = 8
    fg_instance_modulation: float = 0.10  # per-instance multiplicative perturbation
    cmb_spectrum: str = "placeholder"  # or a path to an ell,C_ell CSV
    foreground_file: str = ""  # optional 9-channel .hmap replacing the synthetic F
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "bands_ghz", tuple(float(b) for b in self.bands_ghz))
        object.__setattr__(self, "noise_sigma", tuple(float(s) for s in self.noise_sigma))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        as_resolution(self.nside)
        if len(self.bands_ghz) != 9 or len(self.noise_sigma) != 9:
            raise ValueError("exactly 9 bands and 9 noise levels are required")
        if list(self.bands_ghz) != sorted(self.bands_ghz):
            raise ValueError("bands must be in ascending frequency order")
        if any(s < 0 for s in self.noise_sigma):
            raise ValueError("noise levels must be non-negative")
        if abs(sum(self.split) - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")

    @property
    def bands(self) -> list[BandSpec]:
        return [BandSpec(f, s) for f, s in zip(self.bands_ghz, self.noise_sigma)]

    @property
    def lmax(self) -> int:
        return 3 * self.nside - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("bands_ghz", "noise_sigma", "split"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def derived_rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, tags)]))


def load_cmb_spectrum(cfg: SimConfig) -> hm.PowerSpectrum:
    if cfg.cmb_spectrum == "placeholder":
        return hm.placeholder_spectrum(cfg.lmax)
    spec = hm.read_spectrum_csv(cfg.cmb_spectrum)
    if spec.lmax < cfg.lmax:
        cl = np.zeros(cfg.lmax + 1)
        cl[: spec.lmax + 1] = spec.cl
        spec = hm.PowerSpectrum(cl)
    return spec


# ---------------------------------------------------------------------------
# components


def simulate_cmb(spec: hm.PowerSpectrum, res, beam: hm.Beam, rng: np.random.Generator,
                 lmax: int | None = None) -> SkyMap:
    """Gaussian CMB realization smoothed by the beam."""
    res = as_resolution(res)
    lmax = min(spec.lmax, hm.max_synth_lmax(res)) if lmax is None else lmax
    alm = hm.sample_alm(spec, rng, lmax)
    return hm.synthesize(hm.apply_beam(alm, beam), res)


def band_profile(theta: np.ndarray, width_deg: float) -> np.ndarray:
    """``exp(-(|90 - theta_deg| / width)^2)``: peaks on the equator."""
    lat = np.abs(90.0 - np.degrees(theta))
    return np.exp(-((lat / width_deg) ** 2))


def frequency_scaling(freq_ghz, index: float, pivot_ghz: float = 100.0):
    return (np.asarray(freq_ghz, dtype=np.float64) / pivot_ghz) ** index


def large_scale_field(res, lmax: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-rms random field with power only at ``2 <= l <= lmax``."""
    res = as_resolution(res)
    lmax = min(lmax, hm.max_synth_lmax(res))
    cl = np.zeros(lmax + 1)
    cl[2:] = 1.0
    vals = hm.synthesize(hm.sample_alm(hm.PowerSpectrum(cl), rng), res).values[0]
    vals = vals - vals.mean()
    return vals / np.sqrt(np.mean(vals**2))


def foreground_template(cfg: SimConfig, master_seed: int) -> np.ndarray:
    """Fixed foreground amplitude at the pivot frequency, per pixel (uK)."""
    res = Resolution(cfg.nside)
    theta, _ = pixel_angles(res)
    pattern = large_scale_field(res, cfg.fg_pattern_lmax, derived_rng(master_seed, _FG_FIXED))
    # exp keeps the template positive for any contrast
    return cfg.fg_amplitude * band_profile(theta, cfg.fg_width_deg) * np.exp(cfg.fg_pattern_amplitude * pattern)


def synth_foreground(cfg: SimConfig, master_seed: int) -> SkyMap:
    """The dataset's fixed 9-band foreground ``F``."""
    if cfg.foreground_file:
        from .mapio import load_map

        fg = load_map(cfg.foreground_file)
        if fg.channels != 9 or fg.nside != cfg.nside:
            raise ValueError(f"{cfg.foreground_file}: need 9 channels at nside={cfg.nside}")
        return fg
    template = foreground_template(cfg, master_seed)
    index = spectral_index_map(cfg, master_seed)
    g = frequency_scaling(np.asarray(cfg.bands_ghz)[:, None], index[None, :], cfg.fg_pivot_ghz)
    return SkyMap(Resolution(cfg.nside), g * template[None, :])


def spectral_index_map(cfg: SimConfig, master_seed: int) -> np.ndarray:
    """Per-pixel spectral index; uniform unless ``fg_index_variation > 0``."""
    res = Resolution(cfg.nside)
    index = np.full(res.n_pixels, float(cfg.fg_spectral_index))
    if cfg.fg_index_variation:
        pattern = large_scale_field(res, cfg.fg_pattern_lmax, derived_rng(master_seed, _FG_INDEX))
        index += cfg.fg_index_variation * pattern
    return index


def instance_foreground(cfg: SimConfig, fixed: SkyMap, rng: np.random.Generator) -> np.ndarray:
    """Per-instance multiplicative large-scale perturbation of the fixed foreground."""
    if cfg.fg_instance_modulation == 0:
        return fixed.values.copy()
    mod = large_scale_field(cfg.nside, cfg.fg_pattern_lmax, rng)
    return fixed.values * (1.0 + cfg.fg_instance_modulation * mod)[None, :]


def default_noise_modulation(res, amplitude: float = 0.5) -> np.ndarray:
    theta, _ = pixel_angles(res)
    return 1.0 + amplitude * np.abs(np.cos(theta))


def noise_realization(band: BandSpec, res, modulation, rng: np.random.Generator) -> SkyMap:
    """``N(p) = sigma_band * m(p) * z_p`` with i.i.d. standard normal ``z``."""
    res = as_resolution(res)
    modulation = np.asarray(modulation, dtype=np.float64)
    if modulation.shape != (res.n_pixels,):
        raise ValueError("modulation map has the wrong length")
    if np.any(modulation <= 0):
        raise ValueError("noise modulation must be strictly positive")
    z = rng.standard_normal(res.n_pixels)
    return SkyMap(res, (band.noise_sigma * modulation * z)[None, :])


# ---------------------------------------------------------------------------
# instances and datasets


@dataclass
class SimulationInstance:
    id: int
    x: SkyMap  # 9 channels
    y: SkyMap  # 1 channel
    seeds: dict = field(default_factory=dict)


def simulate_instance(cfg: SimConfig, master_seed: int, inst_id: int,
                      fixed_fg: SkyMap | None = None, spec: hm.PowerSpectrum | None = None,
                      return_parts: bool = False):
    res = Resolution(cfg.nside)
    spec = load_cmb_spectrum(cfg) if spec is None else spec
    fixed_fg = synth_foreground(cfg, master_seed) if fixed_fg is None else fixed_fg
    beam = hm.Beam(cfg.fwhm_arcmin)
    cmb = simulate_cmb(spec, res, beam, derived_rng(master_seed, _CMB, inst_id), cfg.lmax).values[0]
    fg = instance_foreground(cfg, fixed_fg, derived_rng(master_seed, _FG_MOD, inst_id))
    modulation = default_noise_modulation(res, cfg.noise_modulation)
    noise_rng = derived_rng(master_seed, _NOISE, inst_id)
    noise = np.stack([noise_realization(b, res, modulation, noise_rng).values[0] for b in cfg.bands])
    x = cmb[None, :] + fg + noise
    inst = SimulationInstance(
        inst_id, SkyMap(res, x), SkyMap(res, cmb[None, :]),
        {"master_seed": int(master_seed), "instance": int(inst_id)},
    )
    if return_parts:
        return inst, {"cmb": cmb, "foreground": fg, "noise": noise}
    return inst


def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if n < 10:
        raise ValueError(f"need at least 10 instances to split, got {n}")
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"n={n} too small for split {fractions}")
    return n_train, n_val, n_test


@dataclass
class DatasetManifest:
    ids: list
    splits: dict  # name -> list of ids
    norm_mean: list
    norm_std: list
    config: dict
    config_hash: str
    master_seed: int
    layout: str = "channels 0-8: observation (30..857 GHz), channel 9: target CMB"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.norm_mean)[:, None]
        std = np.asarray(self.norm_std)[:, None]
        return (x - mean) / std


def assign_splits(n: int, master_seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    n_train, n_val, _ = split_counts(n, fractions)
    perm = derived_rng(master_seed, _SPLIT).permutation(n)
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "validation": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }


def normalization_stats(xs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all pixels of the given observations."""
    stack = np.stack(xs)  # (n, C, N)
    mean = stack.mean(axis=(0, 2))
    std = stack.std(axis=(0, 2))
    if np.any(std == 0):
        raise ValueError("a channel has zero variance over the training split")
    return mean, std


def build_dataset(n: int, cfg: SimConfig, master_seed: int):
    """Simulate ``n`` instances and the manifest (splits + training-split stats)."""
    splits = assign_splits(n, master_seed, cfg.split)
    spec = load_cmb_spectrum(cfg)
    fixed = synth_foreground(cfg, master_seed)
    instances = [simulate_instance(cfg, master_seed, i, fixed, spec) for i in range(n)]
    mean, std = normalization_stats([instances[i].x.values for i in splits["train"]])
    manifest = DatasetManifest(
        ids=list(range(n)),
        splits=splits,
        norm_mean=[float(v) for v in mean],
        norm_std=[float(v) for v in std],
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        master_seed=int(master_seed),
    )
    return instances, manifest
