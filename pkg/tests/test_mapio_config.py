import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bayescmb import config, mapio, skysim
from bayescmb.healpix import Resolution, SkyMap


class TestHmap:
    def test_layout_frozen(self):
        m = SkyMap(Resolution(1), np.arange(12.0)[None], units="uK")
        blob = mapio.encode_map(m)
        assert blob[:5] == b"HMAP1"
        assert struct.unpack_from("<IBIH", blob, 5) == (1, 0, 1, 2)
        assert blob[16:18] == b"uK"
        assert len(blob) == 18 + 12 * 8
        assert np.frombuffer(blob[18:], "<f8")[5] == 5.0

    @given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.text(max_size=8), st.data())
    def test_round_trip(self, nside, channels, units, data):
        vals = data.draw(hnp.arrays(np.float64, (channels, 12 * nside**2),
                                    elements=st.floats(allow_nan=False, allow_infinity=False)))
        m = mapio.decode_map(mapio.encode_map(SkyMap(Resolution(nside), vals, units=units)))
        assert m.nside == nside and m.units == units
        np.testing.assert_array_equal(m.values, vals)

    def test_file_round_trip(self, tmp_path, rng):
        m = SkyMap(Resolution(2), rng.standard_normal((3, 48)))
        mapio.save_map(tmp_path / "a.hmap", m)
        np.testing.assert_array_equal(mapio.load_map(tmp_path / "a.hmap").values, m.values)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b"HMAP2" + b[5:], "magic"),
        (lambda b: b[:9] + b"\x01" + b[10:], "ordering"),
        (lambda b: b[:12], "header"),
    ])
    def test_corrupt(self, mutate, match):
        blob = mapio.encode_map(SkyMap(Resolution(1), np.zeros((1, 12))))
        with pytest.raises(mapio.FormatError, match=match):
            mapio.decode_map(mutate(blob))


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    inst, man = skysim.build_dataset(10, skysim.SimConfig(nside=2), 3)
    mapio.write_dataset(root, inst, man)
    return root, inst, man


class TestDatasetDir:
    def test_round_trip(self, ds):
        root, inst, man = ds
        d = mapio.Dataset(root)
        assert d.nside == 2 and d.manifest == man
        assert d.ids("train") == man.splits["train"]
        np.testing.assert_array_equal(d.observation(4), inst[4].x.values)
        np.testing.assert_array_equal(d.target(4), inst[4].y.values[0])
        assert d.inputs([1, 2]).shape == (2, 9, 48) and d.targets([1]).shape == (1, 1, 48)
        np.testing.assert_allclose(d.inputs([0])[0], man.normalize(inst[0].x.values))

    def test_errors(self, ds, tmp_path):
        with pytest.raises(KeyError):
            mapio.Dataset(ds[0]).ids("holdout")
        with pytest.raises(FileNotFoundError):
            mapio.Dataset(tmp_path)

    def test_directory_hash(self, ds, tmp_path):
        root = ds[0]
        h = mapio.directory_hash(root)
        assert h == mapio.directory_hash(root)
        (tmp_path / "x").write_text("a")
        assert mapio.directory_hash(tmp_path) != mapio.directory_hash(root)

    def test_ensure_output_dir(self, tmp_path):
        out = mapio.ensure_output_dir(tmp_path / "o", force=False)
        (out / "f").write_text("x")
        with pytest.raises(FileExistsError):
            mapio.ensure_output_dir(out, force=False)
        assert mapio.ensure_output_dir(out, force=True) == out

    def test_atomic_write(self, tmp_path):
        mapio.atomic_write_bytes(tmp_path / "b", b"abc")
        assert (tmp_path / "b").read_bytes() == b"abc"
        assert not (tmp_path / "b.tmp").exists()


class TestRunConfig:
    def test_defaults_are_published_values(self):
        c = config.RunConfig()
        assert c["resolution"]["nside"] == 64
        assert c["simulation"]["fwhm_arcmin"] == 150.0
        assert c["bands"]["freqs_ghz"] == [30, 44, 70, 100, 143, 217, 353, 545, 857]
        assert c["simulation"]["split"] == [0.8, 0.1, 0.1]
        t = c["training"]
        assert (t["deterministic_lr"], t["bayesian_lr"]) == (1e-3, 1e-5)
        assert (t["deterministic_batch"], t["bayesian_batch"]) == (10, 7)
        assert (t["weight_val"], t["weight_train"], t["length_scale"]) == (0.8, 0.2, 1e-4)
        assert c["architecture"]["p_init"] == 1e-3 and c["inference"]["T"] == 50
        assert c["evaluation"]["cut_deg"] == 30.0
        assert c.spectrum_lmax() == 128

    def test_views(self):
        c = config.RunConfig()
        assert c.sim_config() == skysim.SimConfig()
        assert c.unet_config(True).bayesian and c.unet_config().widths == (32, 64, 128)
        b = c.train_config("bayesian")
        assert (b.optimizer, b.lr, b.batch_size) == ("adam", 1e-5, 7)
        with pytest.raises(config.ConfigError):
            c.train_config("other")

    def test_load_overrides(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[resolution]\nnside = 16\n[architecture]\ndepth = 2\nwidths = [8, 16]\n'
                     '[simulation]\nfwhm_arcmin = 600\n')
        c = config.RunConfig.load(p)
        assert c["resolution"]["nside"] == 16 and c["simulation"]["fwhm_arcmin"] == 600.0
        assert isinstance(c["simulation"]["fwhm_arcmin"], float)
        assert c["training"]["patience"] == 25

    @pytest.mark.parametrize("text,match", [
        ("[bogus]\na = 1\n", "unknown config section"),
        ("[training]\nlearning_rate = 0.1\n", "unknown key"),
        ("[training]\npatience = 'x'\n", "expected int"),
        ("[evaluation]\nilc_mask = 1\n", "true or false"),
        ("[inference]\nT = 1\n", "at least 2"),
        ("[evaluation]\ncut_deg = 95.0\n", "cut_deg"),
        ("[resolution]\nnside = 12\n", "power of two"),
        ("[training\n", "c.toml"),
    ])
    def test_rejects(self, tmp_path, text, match):
        p = tmp_path / "c.toml"
        p.write_text(text)
        with pytest.raises(config.ConfigError, match=match):
            config.RunConfig.load(p)

    def test_toml_round_trip(self, tmp_path):
        c = config.RunConfig.from_dict({"training": {"seed": 5}, "simulation": {"cmb_spectrum": 'a "b"'}})
        p = tmp_path / "c.toml"
        p.write_text(c.to_toml())
        assert config.RunConfig.load(p).values == c.values

    def test_defaults_text_has_notes(self):
        text = config.defaults_text()
        assert "[training]" in text and "bayesian_lr = 1e-05" in text and "#" in text
