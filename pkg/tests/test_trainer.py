from math import log

import pytest
import torch
from torch.func import functional_call

from app.core.exceptions import PreconditionError
from app.core.experiments import critical_period
from app.core.numeric import RngStream
from app.core.sequences import BINARY, Periodic
from app.core.trainer import (
    Batch,
    _schedule,
    build_trainable,
    finite_difference_check,
    grad,
    loss_next_token,
    train,
)
from app.core.transformer import build_random_model, build_standard_model
from app.models.schemas import RunManifest, TrainableConfig
from app.utils.results import config_hash


def small_config(**overrides) -> TrainableConfig:
    values = {
        "d": 4,
        "k": 1,
        "context": 8,
        "window_offset_max": 4,
        "batch_size": 4,
        "steps": 30,
        "lr": 0.05,
        "log_every": 10,
        "mixture": [{"spec": "constant0"}],
    }
    values.update(overrides)
    return TrainableConfig(**values)


class TestBatch:
    """Testes das janelas de treino"""

    def test_shift(self):
        """Testa targets deslocados de uma posição"""
        batch = Batch.from_windows(["0110", "1001"], BINARY)
        assert batch.inputs.tolist() == [[0, 1, 1], [1, 0, 0]]
        assert batch.targets.tolist() == [[1, 1, 0], [0, 0, 1]]
        assert batch.size == 2

    def test_short_window(self):
        """Testa janela de comprimento 1"""
        with pytest.raises(PreconditionError):
            Batch.from_windows(["0"], BINARY)


class TestLossAndGradient:
    """Testes da loss e do gradiente"""

    def test_uniform_loss(self):
        """Testa modelo zerado: loss = log 2"""
        model = build_standard_model(BINARY, 4, 1)
        batch = Batch.from_windows(["010101"], BINARY)
        assert loss_next_token(model, batch) == pytest.approx(log(2))

    def test_gradient_finite(self):
        """Testa gradiente com uma entrada por parâmetro"""
        model = build_random_model(BINARY, 4, 1, RngStream(1))
        record = grad(model, Batch.from_windows(["0110100", "1110001"], BINARY))
        assert set(record.grads) == {name for name, _ in model.named_parameters()}
        assert record.norm() > 0.0

    @pytest.mark.parametrize("pe_kind", ["rotary-relative", "sinusoidal"])
    def test_finite_difference(self, pe_kind):
        """Testa gradiente analítico contra diferenças centrais"""
        model = build_random_model(BINARY, 4, 2, RngStream(2), pe_kind=pe_kind)
        batch = Batch.from_windows(["01101001", "11100010"], BINARY)
        report = finite_difference_check(model, batch, RngStream(3), samples=60)
        assert report.max_relative_error < 1e-5
        assert len(report.checked) == 60

    def test_autograd_gradcheck(self):
        """Testa gradcheck do torch sobre a matriz de query"""
        model = build_random_model(BINARY, 4, 1, RngStream(5))
        batch = Batch.from_windows(["0110", "1011"], BINARY)
        name, param = next((n, p) for n, p in model.named_parameters() if p.dim() == 2)

        def loss_of(value):
            log_probs = functional_call(model, {name: value}, (batch.inputs,))
            return -log_probs.gather(-1, batch.targets[..., None]).mean()

        weight = param.detach().clone().requires_grad_(True)
        assert torch.autograd.gradcheck(loss_of, (weight,), eps=1e-6, atol=1e-7)

    @pytest.mark.slow
    def test_finite_difference_random_pairs(self):
        """Testa 20 pares (modelo, batch) com erro relativo <= 1e-4"""
        for trial in range(20):
            model = build_random_model(BINARY, 4, 1 + trial % 2, RngStream(100 + trial))
            windows = [Periodic("0" * (1 + trial % 4) + "1").prefix(10), "0110100111"]
            report = finite_difference_check(model, Batch.from_windows(windows, BINARY), RngStream(trial), samples=40)
            assert report.max_relative_error <= 1e-4

    def test_finite_difference_restores_parameters(self):
        """Testa parâmetros intactos após a verificação"""
        model = build_random_model(BINARY, 4, 1, RngStream(4))
        before = {k: v.clone() for k, v in model.state_dict().items()}
        finite_difference_check(model, Batch.from_windows(["0101"], BINARY), RngStream(0), samples=10)
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


class TestTraining:
    """Testes do loop de treino"""

    def test_loss_decreases(self):
        """Testa loss final menor que a inicial"""
        result = train(small_config())
        assert len(result.losses) == 30
        assert result.losses[-1] < result.losses[0]
        assert result.manifest["summary"]["final_loss"] == result.losses[-1]

    def test_manifest_shape(self):
        """Testa manifesto de treino no mesmo formato dos demais experimentos"""
        config = small_config(steps=2)
        manifest = train(config, ["train", "--seed", "0"]).manifest
        assert RunManifest.model_validate(manifest).experiment == "train"
        assert manifest["command_line"] == ["train", "--seed", "0"]
        assert manifest["config_hash"] == config_hash(config.model_dump(mode="json"))
        assert manifest["tie_break"] == "lowest-index"

    def test_sgd_descends(self):
        """Testa SGD com passo pequeno"""
        result = train(small_config(optimizer="sgd", lr=1e-3, steps=5))
        assert result.losses[-1] <= result.losses[0] + 1e-6

    def test_reproducible(self):
        """Testa mesma seed, mesmas losses"""
        assert train(small_config(steps=5)).losses == train(small_config(steps=5)).losses

    def test_initialization_seeded(self):
        """Testa inicialização dependente da seed"""
        a = build_trainable(small_config(seed=1)).state_dict()
        b = build_trainable(small_config(seed=2)).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_schedule(self):
        """Testa warmup linear e decaimento cosseno"""
        factor = _schedule(small_config(warmup=4, steps=14, schedule="cosine"))
        assert factor(0) == pytest.approx(0.25)
        assert factor(4) == pytest.approx(1.0)
        assert factor(9) == pytest.approx(0.5)

    def test_zero_steps(self):
        """Testa treino sem passos"""
        result = train(small_config(steps=0))
        assert result.losses == []
        assert result.manifest["summary"]["final_loss"] is None

    @pytest.mark.slow
    def test_learns_alternation(self):
        """Testa treino longo em (01)^omega até loss baixa"""
        config = small_config(steps=400, lr=0.02, mixture=[{"spec": "periodic:01"}], log_every=100)
        result = train(config)
        assert result.losses[-1] < 0.1
        window = Periodic("01").prefix(9)
        assert result.model.distribution(window[:-1]).probs[int(window[-1])] > 0.9


class TestCriticalPeriodAfterTraining:
    """Testes do período crítico de um modelo treinado"""

    @pytest.mark.slow
    def test_trained_model_has_critical_period(self):
        """Testa d=32, k=2 treinado em períodos 2..6: 2 < p* <= 40 e margem mínima perto de p*"""
        mixture = [{"spec": "periodic:" + "0" * (p - 1) + "1"} for p in range(2, 7)]
        config = TrainableConfig(d=32, k=2, steps=1500, lr=3e-3, seed=0, log_every=500, mixture=mixture)
        result = train(config)
        assert result.losses[-1] < result.losses[0]

        found = critical_period(result.model, r=10, p_max=40, stop_at_first=True)
        assert found.critical is not None
        assert 2 < found.critical <= 40
        by_p = {r.p: r for r in found.results}
        assert by_p[2].success and by_p[3].success
        assert by_p[found.critical].certainty <= by_p[found.critical - 2].certainty
