import shutil
import tempfile
from pathlib import Path

import pytest

from config import (
    build_pipeline_config,
    build_synth_spec,
    config_hash,
    load_settings,
    merge_settings,
    normalize_key,
    parse_config_text,
    read_config_file,
)
from exceptions import ConfigError, SpecError


class TestParsing:
    def test_key_value_lines(self):
        """Blank lines and comments are skipped; keys are normalized."""
        text = """
        # sweep settings
        seed = 7
        admm-iterations = 50   # more rounds
        Variance_Threshold=0.9
        """
        assert parse_config_text(text) == {
            "seed": "7",
            "admm_iterations": "50",
            "variance_threshold": "0.9",
        }

    def test_normalize_key(self):
        """Flag spelling and file spelling name the same setting."""
        assert normalize_key("--admm-iterations") == "admm_iterations"
        assert normalize_key(" noise_frac ") == "noise_frac"

    def test_malformed_line(self):
        """A line without '=' is an error with its line number."""
        with pytest.raises(ConfigError, match="config.txt:2"):
            parse_config_text("seed = 1\ncenters 4\n", "config.txt")

    def test_unknown_key(self):
        """Unknown settings are rejected rather than ignored."""
        with pytest.raises(ConfigError, match="unknown setting 'colour'"):
            parse_config_text("colour = blue")

    def test_duplicate_key_warns(self, caplog):
        """The last value wins, with a warning."""
        settings = parse_config_text("seed = 1\nseed = 2\n")
        assert settings["seed"] == "2"
        assert "set twice" in caplog.text


class TestFiles:
    def setup_method(self):
        """Set up a temporary directory for config files."""
        self.temp_dir = tempfile.mkdtemp()
        self.config_path = Path(self.temp_dir) / "fedcov.conf"

    def teardown_method(self):
        """Clean up temporary files."""
        shutil.rmtree(self.temp_dir)

    def test_read_file(self):
        """Config files parse like text."""
        self.config_path.write_text("centers = 10\nrho = 2.5\n")
        assert read_config_file(self.config_path) == {"centers": "10", "rho": "2.5"}

    def test_missing_file(self):
        """A missing file is a config error."""
        with pytest.raises(ConfigError):
            read_config_file(Path(self.temp_dir) / "absent.conf")

    def test_flags_override_file(self):
        """Flag values win over the file; unset flags do not."""
        self.config_path.write_text("centers = 10\nrho = 2.5\n")
        settings = load_settings(str(self.config_path), {"centers": 4, "rho": None, "seed": 3})
        assert settings == {"centers": 4, "rho": "2.5", "seed": 3}


class TestModels:
    def test_merge_rejects_unknown_override(self):
        """Overrides go through the same key check as files."""
        with pytest.raises(ConfigError):
            merge_settings({}, {"colour": "blue"})

    def test_synth_spec_from_strings(self):
        """File strings are coerced into the synthetic data spec."""
        spec = build_synth_spec(
            {"seed": "7", "subjects": "120", "features": "10", "covariates": "3", "centers": "4"}
        )
        assert (spec.seed, spec.n_total, spec.n_features, spec.q, spec.n_centers) == (7, 120, 10, 3, 4)

    def test_bad_synth_spec(self):
        """Invalid synthetic specs raise SpecError."""
        with pytest.raises(SpecError):
            build_synth_spec({"subjects": "100", "centers": "3"})

    def test_pipeline_config(self):
        """ADMM keys go into the nested ADMM config."""
        config = build_pipeline_config(
            {"rho": "2", "admm_iterations": "25", "adaptive_rho": "true", "covariate_spec": "intercept,age"}
        )
        assert config.admm.rho == 2.0
        assert config.admm.iterations == 25
        assert config.admm.adaptive_rho is True
        assert config.covariate_spec == ("intercept", "age")

    def test_bad_pipeline_config(self):
        """Out-of-range values are config errors."""
        with pytest.raises(ConfigError):
            build_pipeline_config({"rho": "-1"})
        with pytest.raises(ConfigError):
            build_pipeline_config({"variance_threshold": "1.5"})

    def test_hash_is_stable(self):
        """Equal configurations hash equally; any change moves the hash."""
        a = build_pipeline_config({"rho": "2"})
        b = build_pipeline_config({"rho": 2.0})
        c = build_pipeline_config({"rho": "3"})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 64


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
