import numpy as np
import pytest
import torch

from app.core.attention import (
    AttentionLayer,
    ConstantOne,
    DotProductExp,
    LinearValue,
    PassThrough,
    Residual,
    SSMaxScaled,
    layer_forward,
)
from app.core.encodings import (
    ConstantZero,
    RotaryRelative,
    Sinusoidal,
    TableBounded,
    TableEmbedding,
    make_encoding,
)
from app.core.exceptions import AlphabetError, DimensionMismatchError, ModelConfigError
from app.core.numeric import DTYPE, RngStream
from app.core.sequences import BINARY
from app.core.transformer import (
    AffineSoftmax,
    Greedy,
    Sampled,
    TransformerModel,
    build_random_model,
    build_standard_model,
    check_compactness,
    decode_autoregressive,
    decode_with_trace,
    strip_ssmax,
    transformer_forward,
    with_ssmax,
)


def mean_layer(dim: int) -> AttentionLayer:
    return AttentionLayer(ConstantZero(), ConstantOne(), LinearValue.identity(dim), PassThrough())


class TestEncodings:
    """Testes dos encodings posicionais compactos"""

    def test_constant_zero(self):
        """Testa p(i, j) = 0"""
        assert torch.equal(ConstantZero(3).encode(1, 9), torch.zeros(3, dtype=DTYPE))

    def test_sinusoidal_bounded(self):
        """Testa coordenadas em [-1, 1]"""
        pe = Sinusoidal(2)
        assert pe.dim == 8
        assert pe.max_norm(2000) <= pe.declared_bound

    def test_rotary_clips_offset(self):
        """Testa que offsets acima de L repetem a última linha"""
        pe = RotaryRelative(2, max_offset=8)
        assert torch.equal(pe.encode(1, 100), pe.encode(1, 9))
        assert not torch.equal(pe.encode(1, 3), pe.encode(1, 4))

    def test_rotary_finite_rows(self):
        """Testa tabela com L + 1 linhas"""
        assert RotaryRelative(3, max_offset=5).table().shape == (6, 6)

    def test_table_one_hot(self):
        """Testa tabela identidade"""
        pe = TableBounded.one_hot(3)
        assert pe.encode(2, 2).tolist() == [1.0, 0.0, 0.0]
        assert pe.encode(1, 50).tolist() == [0.0, 0.0, 1.0]

    def test_rotary_needs_even_dim(self):
        """Testa largura ímpar"""
        with pytest.raises(ModelConfigError):
            make_encoding("rotary-relative", 5)

    def test_unknown_kind(self):
        """Testa tipo desconhecido"""
        with pytest.raises(ModelConfigError):
            make_encoding("learned-absolute", 4)

    def test_embedding_cycle(self):
        """Testa linhas de posição: preâmbulo e ciclo"""
        embedding = TableEmbedding(
            torch.zeros(2, 1, dtype=DTYPE),
            torch.tensor([[10.0]], dtype=DTYPE),
            torch.tensor([[1.0], [2.0]], dtype=DTYPE),
        )
        out = embedding(torch.zeros(1, 5, dtype=torch.long), torch.arange(1, 6))
        assert out[0, :, 0].tolist() == [10.0, 1.0, 2.0, 1.0, 2.0]


class TestAttentionLayer:
    """Testes da camada de atenção"""

    def test_uniform_weights_average_prefix(self):
        """Testa w = 1: a_j é a média de x_1..x_j"""
        xs = [[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]]
        ys = layer_forward(mean_layer(2), xs)
        assert np.allclose(ys, [[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]])

    def test_causal(self):
        """Testa que y_j não depende de x_{j+1}"""
        layer = mean_layer(2)
        a = layer_forward(layer, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])
        b = layer_forward(layer, [[1.0, 1.0], [2.0, 2.0], [9.0, -9.0]])
        assert np.array_equal(a[:2], b[:2])

    def test_residual(self):
        """Testa y = a + x"""
        layer = AttentionLayer(ConstantZero(), ConstantOne(), LinearValue.identity(1), Residual())
        assert layer_forward(layer, [[2.0], [4.0]]).ravel().tolist() == [4.0, 7.0]

    def test_weight_positive(self):
        """Testa peso em (0, inf)"""
        weight = DotProductExp(2, 2, 1)
        with torch.no_grad():
            weight.query.fill_(50.0)
            weight.key.fill_(-50.0)
        assert weight.weight([1.0, 1.0], [1.0, 1.0], 1, 2, ConstantZero()) > 0.0

    def test_ragged_input(self):
        """Testa vetores de dimensões diferentes"""
        with pytest.raises(DimensionMismatchError):
            layer_forward(mean_layer(2), [[1.0, 2.0], [1.0]])

    def test_wrong_dimension(self):
        """Testa dimensão diferente da camada"""
        with pytest.raises(DimensionMismatchError):
            layer_forward(mean_layer(2), [[1.0, 2.0, 3.0]])

    def test_ssmax_not_nested(self):
        """Testa ssmax aninhado"""
        with pytest.raises(ModelConfigError):
            SSMaxScaled(SSMaxScaled(ConstantOne()))

    def test_pe_dim_checked(self):
        """Testa encoding incompatível com a função de peso"""
        with pytest.raises(ModelConfigError):
            AttentionLayer(Sinusoidal(1), DotProductExp(2, 2, 3), LinearValue(2), Residual())


class TestTransformerModel:
    """Testes do modelo completo"""

    def test_distribution_valid(self, random_model):
        """Testa distribuição sobre o alfabeto"""
        dist = transformer_forward(random_model, "0110")
        assert len(dist) == 2
        assert dist.probs.sum() == pytest.approx(1.0)

    def test_zero_model_uniform(self):
        """Testa parâmetros zerados: uniforme"""
        model = build_standard_model(BINARY, 4, 1)
        assert np.allclose(model.distribution("01").probs, [0.5, 0.5])

    def test_batch_matches_single(self, random_model):
        """Testa batch igual a prompts individuais"""
        ids = random_model.token_ids(["0101", "1110"])
        batched = random_model.last_probs(ids)
        assert np.allclose(batched[1], random_model.distribution("1110").probs, atol=1e-12)

    def test_empty_prompt(self, random_model):
        """Testa prompt vazio"""
        with pytest.raises(ModelConfigError):
            random_model.token_ids("")

    def test_mixed_lengths(self, random_model):
        """Testa batch com comprimentos diferentes"""
        with pytest.raises(ModelConfigError):
            random_model.token_ids(["01", "011"])

    def test_unknown_token(self, random_model):
        """Testa token fora do alfabeto"""
        with pytest.raises(AlphabetError):
            random_model.distribution("012")

    def test_alphabet_mismatch(self):
        """Testa embedding incompatível com o alfabeto"""
        with pytest.raises(ModelConfigError):
            TransformerModel(BINARY, TableEmbedding.empty(3, 2), [], AffineSoftmax(2, 2))

    def test_log_probs_shape(self, random_model):
        """Testa shape (B, n, |Sigma|)"""
        out = random_model(random_model.token_ids(["010", "111"]))
        assert out.shape == (2, 3, 2)


class TestDecoding:
    """Testes da decodificação autoregressiva"""

    def test_incremental_matches_full(self, random_model):
        """Testa cache incremental contra forward completo"""
        prompt = "0110"
        generated, dists = decode_with_trace(random_model, prompt, 6)
        assert len(generated) == 6
        for k, dist in enumerate(dists):
            full = random_model.distribution(prompt + generated[:k])
            assert np.allclose(dist.probs, full.probs, atol=1e-12)

    def test_incremental_matches_full_sinusoidal(self, sinusoidal_model):
        """Testa cache incremental com encoding sinusoidal"""
        generated, dists = decode_with_trace(sinusoidal_model, "1", 5)
        full = sinusoidal_model.distribution("1" + generated[:4])
        assert np.allclose(dists[4].probs, full.probs, atol=1e-12)

    def test_greedy_deterministic(self, random_model):
        """Testa greedy reprodutível"""
        assert decode_autoregressive(random_model, "01", 8) == decode_autoregressive(random_model, "01", 8)

    def test_sampled_reproducible(self, random_model):
        """Testa sampling com a mesma seed"""
        first = decode_autoregressive(random_model, "01", 8, Sampled(1.0, RngStream(4)))
        second = decode_autoregressive(random_model, "01", 8, Sampled(1.0, RngStream(4)))
        assert first == second

    def test_zero_steps(self, random_model):
        """Testa steps = 0"""
        assert decode_with_trace(random_model, "0", 0) == ("", [])

    def test_negative_steps(self, random_model):
        """Testa steps negativo"""
        with pytest.raises(ModelConfigError):
            decode_autoregressive(random_model, "0", -1, Greedy())

    def test_bad_temperature(self):
        """Testa temperatura não positiva"""
        with pytest.raises(ModelConfigError):
            Sampled(0.0, RngStream(0))


class TestCompactness:
    """Testes da verificação de compacidade"""

    def test_random_model_passes(self, random_model):
        """Testa modelo padrão dentro dos limites"""
        report = check_compactness(random_model, 1000)
        assert report.passed
        assert report.to_dict()["passed"] is True
        assert len(report.encoding_norms) == 2

    def test_embedding_bound_violated(self):
        """Testa limite declarado menor que a norma real"""
        model = build_standard_model(BINARY, 2, 0)
        with torch.no_grad():
            model.embedding.token_table.fill_(3.0)
        model.embedding._declared_bound = 1.0
        assert not check_compactness(model, 10).passed

    def test_bad_horizon(self, random_model):
        """Testa horizonte < 1"""
        with pytest.raises(ModelConfigError):
            check_compactness(random_model, 0)


class TestSSMax:
    """Testes do escalonamento ssmax"""

    def test_length_aware(self, random_model):
        """Testa marcação de modelo dependente de comprimento"""
        scaled = with_ssmax(random_model, 1.0)
        assert scaled.length_aware
        assert not random_model.length_aware

    def test_strip_restores(self, random_model):
        """Testa strip devolvendo o modelo original"""
        restored = strip_ssmax(with_ssmax(random_model, 2.0))
        assert np.allclose(restored.distribution("0101").probs, random_model.distribution("0101").probs)

    def test_changes_distribution(self, random_model):
        """Testa que ssmax altera as saídas em prompts longos"""
        scaled = with_ssmax(random_model, 3.0)
        prompt = "01" * 20
        assert not np.allclose(scaled.distribution(prompt).probs, random_model.distribution(prompt).probs)

    def test_double_wrap(self, random_model):
        """Testa ssmax aplicado duas vezes"""
        with pytest.raises(ModelConfigError):
            with_ssmax(with_ssmax(random_model))

    @pytest.mark.parametrize("j", [3, 7, 50])
    def test_unit_scale_matches_softmax(self, random_model, j):
        """Testa ssmax em j = e^(1/s): mesmos pesos do softmax"""
        layer = random_model.layers[0]
        scaled = SSMaxScaled(layer.weight, 1.0 / np.log(j))
        gen = np.random.default_rng(j)
        x_i, x_j = gen.normal(size=random_model.dim), gen.normal(size=random_model.dim)
        expected = layer.weight.weight(x_i, x_j, 2, j, layer.pe)
        assert scaled.weight(x_i, x_j, 2, j, layer.pe) == pytest.approx(expected, rel=1e-12)


class TestDecodeOracle:
    """Oráculo: cache incremental contra recomputação completa"""

    @pytest.mark.slow
    def test_random_triples(self):
        """Testa 200 triplas (modelo, prompt, passos) com |delta| <= 1e-9"""
        gen = np.random.default_rng(2024)
        kinds = ["rotary-relative", "sinusoidal"]
        for trial in range(200):
            model = build_random_model(BINARY, 4, int(gen.integers(1, 3)), RngStream(trial), pe_kind=kinds[trial % 2])
            prompt = "".join(gen.choice(["0", "1"], size=int(gen.integers(1, 12))))
            steps = int(gen.integers(1, 33))
            generated, dists = decode_with_trace(model, prompt, steps)
            for k in sorted({0, steps // 2, steps - 1}):
                full = model.distribution(prompt + generated[:k])
                assert np.max(np.abs(dists[k].probs - full.probs)) <= 1e-9
