import json
from pathlib import Path

import pytest

import app
from app.config import Settings, get_settings
from app.core.exceptions import ConfigError
from app.models.schemas import EndpointConfig, NTSConfig, VerifyConfig
from app.utils.config_loader import load_config, merge_overrides, validate_config
from app.utils.results import config_hash, format_value, write_csv


class TestSettings:
    """Testes das configurações de ambiente"""

    def test_singleton(self):
        """Testa cache do get_settings"""
        assert get_settings() is get_settings()

    def test_env_override(self, monkeypatch):
        """Testa leitura do ambiente"""
        monkeypatch.setenv("SCORE_CLAMP", "40")
        monkeypatch.setenv("MOCK_API_KEYS", "a, b,")
        settings = Settings()
        assert settings.SCORE_CLAMP == 40.0
        assert settings.mock_api_keys_list == ["a", "b"]

    def test_package_metadata(self):
        """Testa versão do pacote sem metadados de template"""
        assert app.__version__.count(".") == 2
        assert getattr(app, "__author__", None) != "Your Name"


class TestExperimentConfig:
    """Testes da validação de configs"""

    def test_discriminated(self):
        """Testa schema escolhido por 'experiment'"""
        config = validate_config({"experiment": "nts", "model": {"random": {}}})
        assert isinstance(config, NTSConfig)
        assert config.samples == 100

    def test_missing_experiment(self):
        """Testa campo experiment ausente"""
        with pytest.raises(ConfigError, match="experiment"):
            validate_config({"model": {"random": {}}})

    def test_unknown_experiment(self):
        """Testa experimento desconhecido"""
        with pytest.raises(ConfigError):
            validate_config({"experiment": "telepathy"})

    def test_two_model_sources(self):
        """Testa mais de uma origem de modelo"""
        with pytest.raises(ConfigError, match="exactly one"):
            validate_config({"experiment": "nts", "model": {"random": {}, "file": "m.json"}})

    def test_bad_sequence_spec(self):
        """Testa spec de sequência inválida"""
        with pytest.raises(ConfigError):
            validate_config({"experiment": "verify", "model": {"random": {}}, "spec": "fibonacci", "eps": 0.1})

    def test_verify_window(self):
        """Testa N >= n0"""
        with pytest.raises(ConfigError):
            validate_config({"experiment": "verify", "model": {"random": {}}, "spec": "constant0",
                             "eps": 0.1, "n0": 10, "N": 5})
        config = validate_config({"experiment": "verify", "model": {"random": {}}, "spec": "constant0", "eps": 0.1})
        assert isinstance(config, VerifyConfig)

    def test_pairs_need_remote(self):
        """Testa pair-sensitivity com modelo local"""
        with pytest.raises(ConfigError, match="remote"):
            validate_config({"experiment": "pair-sensitivity", "model": {"random": {}}, "pairs": [["0", "0"]]})

    def test_endpoint_top_k(self):
        """Testa top_k mínimo"""
        with pytest.raises(ValueError):
            EndpointConfig(base_url="http://x", model="m", top_k=1)

    def test_load_file(self, tmp_path):
        """Testa leitura de arquivo"""
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"experiment": "periodic", "model": {"construct": "family", "periods": [2, 3]}}))
        assert load_config(path).periods == list(range(2, 41))

    @pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.json")), ids=lambda p: p.name)
    def test_bundled_configs(self, path):
        """Testa os configs de exemplo do repositório"""
        config = load_config(path)
        assert config.experiment == json.loads(path.read_text())["experiment"]

    def test_load_invalid_json(self, tmp_path):
        """Testa JSON inválido"""
        path = tmp_path / "c.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_merge_overrides(self):
        """Testa overrides não-None e chaves aninhadas"""
        merged = merge_overrides({"a": 1, "m": {"x": 1}}, {"a": None, "b": 2, "m.y": 3})
        assert merged == {"a": 1, "b": 2, "m": {"x": 1, "y": 3}}


class TestResults:
    """Testes da escrita de resultados"""

    def test_float_format(self):
        """Testa 17 dígitos significativos e bools minúsculos"""
        assert format_value(0.1) == "0.10000000000000001"
        assert format_value(True) == "true"
        assert format_value(None) == ""

    def test_csv(self, tmp_path):
        """Testa header e ordem das colunas"""
        path = write_csv(tmp_path / "r.csv", ("b", "a"), [{"a": 1, "b": 0.5}])
        assert path.read_text(encoding="utf-8") == "b,a\n0.5,1\n"

    def test_config_hash_stable(self):
        """Testa hash independente da ordem das chaves"""
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
