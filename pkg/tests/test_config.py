"""Config file parsing tests."""

import pytest

from spectrelab.config import dump_config, load_config
from spectrelab.victim import ConfigError, VictimConfig


def write(tmp_path, text):
    path = tmp_path / "victim.cfg"
    path.write_text(text)
    return str(path)


class TestLoadConfig:
    def test_full_round_trip(self, tmp_path):
        cfg = VictimConfig(valid_aslr_offset=99, value_secret=1234,
                           mitigation_barrier=True,
                           mitigation_noise_sigma_ns=50.0)
        path = write(tmp_path, dump_config(cfg))
        back = load_config(path)
        assert back.valid_aslr_offset == 99
        assert back.value_secret == 1234
        assert back.mitigation_barrier is True
        assert back.mitigation_noise_sigma_ns == 50.0
        assert back.secrets.bitstream == cfg.secrets.bitstream
        assert back.secrets.bitstream_length == cfg.secrets.bitstream_length

    def test_text_secret(self, tmp_path):
        path = write(tmp_path, "[victim]\nsecret = hi\npublic_zero_bytes = 4\n")
        cfg = load_config(path)
        assert cfg.secrets.bitstream == b"\x00" * 4 + b"hi"
        assert cfg.secrets.bitstream_length == 32

    def test_latency_preset(self, tmp_path):
        path = write(tmp_path, "[latency]\npreset = cloud\n")
        assert load_config(path).latency.sigma_ns == 52_300.0

    def test_latency_noiseless(self, tmp_path):
        path = write(tmp_path, "[latency]\npreset = noiseless\n")
        assert load_config(path).latency.sigma_ns == 0.0

    def test_timing_overrides(self, tmp_path):
        path = write(tmp_path,
                     "[timing]\nhit_cycles = 30\nmiss_cycles = 250\n")
        cfg = load_config(path)
        assert (cfg.hit_cycles, cfg.miss_cycles) == (30, 250)

    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "[victim]\nfrobnicate = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write(tmp_path, "[fleet]\nsize = 9\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_invalid_values_rejected(self, tmp_path):
        path = write(tmp_path, "[victim]\nclock_mode = sundial\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/victim.cfg")

    def test_bad_latency_preset(self, tmp_path):
        path = write(tmp_path, "[latency]\npreset = warp\n")
        with pytest.raises(ConfigError):
            load_config(path)
