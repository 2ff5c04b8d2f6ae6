from math import exp

import httpx
import pytest

from app.api.mock_server import create_app
from app.api.responders import ConstantResponder, FlipDetector, PeriodicContinuation
from app.core.exceptions import (
    AuthMissingError,
    IncompatibleServerError,
    PreconditionError,
    RemoteTransportError,
)
from app.core.experiments import nts_zero, periodic_eval_one
from app.models.remote_client import (
    RemoteNextTokenModel,
    binary_dist,
    next_token_logprobs,
    parse_top_logprobs,
    prompt_pair_sensitivity,
)
from app.models.schemas import EndpointConfig, TokenLogprob

BASE_URL = "http://mock"


def endpoint(**overrides) -> EndpointConfig:
    values = {"base_url": BASE_URL, "model": "mock", "auth_env": None, "backoff": 0.0, "max_retries": 3}
    values.update(overrides)
    return EndpointConfig(**values)


def remote(app, **overrides) -> RemoteNextTokenModel:
    return RemoteNextTokenModel(endpoint(**overrides), transport=httpx.ASGITransport(app=app))


def async_client(app) -> httpx.AsyncClient:
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url=BASE_URL)


class TestParsing:
    """Testes da leitura de respostas"""

    def test_completions_shape(self):
        """Testa top_logprobs em dict"""
        payload = {"choices": [{"logprobs": {"top_logprobs": [{"1": -2.0, "0": -0.2}]}}]}
        items = parse_top_logprobs(payload)
        assert [item.token for item in items] == ["0", "1"]

    def test_chat_shape(self):
        """Testa top_logprobs em lista"""
        payload = {"choices": [{"logprobs": {"content": [{"top_logprobs": [{"token": "1", "logprob": -0.3}]}]}}]}
        assert parse_top_logprobs(payload, "chat")[0].token == "1"

    def test_missing_logprobs(self):
        """Testa resposta sem logprobs"""
        with pytest.raises(IncompatibleServerError):
            parse_top_logprobs({"choices": [{"logprobs": None}]})

    def test_positive_logprob(self):
        """Testa logprob > 0"""
        with pytest.raises(IncompatibleServerError):
            parse_top_logprobs({"choices": [{"logprobs": {"top_logprobs": [{"0": 0.5}]}}]})

    def test_binary_dist(self):
        """Testa tokens com espaço e massa restante em '?'"""
        top = [TokenLogprob(token=" 0", logprob=-0.5), TokenLogprob(token="x", logprob=-1.0)]
        dist, truncated = binary_dist(top)
        assert dist.probs[0] == pytest.approx(exp(-0.5))
        assert dist.probs[1] == 0.0
        assert truncated


class TestNextTokenLogprobs:
    """Testes das requisições ao endpoint"""

    @pytest.mark.asyncio
    async def test_constant(self):
        """Testa dois tokens com os logprobs do responder"""
        async with async_client(create_app(api_keys=[])) as client:
            items = await next_token_logprobs(endpoint(), "0000", client)
        assert [(item.token, item.logprob) for item in items] == [("0", -0.1), ("1", -2.4)]

    @pytest.mark.asyncio
    async def test_chat_api(self):
        """Testa endpoint de chat"""
        async with async_client(create_app(FlipDetector(), api_keys=[])) as client:
            items = await next_token_logprobs(endpoint(api="chat"), "x: 0100", client)
        assert items[0].token == "1"

    @pytest.mark.asyncio
    async def test_incompatible(self):
        """Testa servidor sem logprobs"""
        async with async_client(create_app(omit_logprobs=True, api_keys=[])) as client:
            with pytest.raises(IncompatibleServerError):
                await next_token_logprobs(endpoint(), "0", client)

    @pytest.mark.asyncio
    async def test_retries(self):
        """Testa retry após dois 503"""
        log = []
        async with async_client(create_app(fail_first=2, api_keys=[])) as client:
            await next_token_logprobs(endpoint(), "0", client, log)
        assert log[0].retries == 2
        assert log[0].status == 200
        assert len(log[0].prompt_sha256) == 64

    @pytest.mark.asyncio
    async def test_retries_exhausted(self):
        """Testa falha após max_retries com registro da tentativa"""
        log = []
        async with async_client(create_app(fail_first=10, api_keys=[])) as client:
            with pytest.raises(RemoteTransportError):
                await next_token_logprobs(endpoint(max_retries=2), "0", client, log)
        assert len(log) == 1
        assert (log[0].status, log[0].retries, log[0].error) == (503, 2, "retries-exhausted")

    @pytest.mark.asyncio
    async def test_transport_failure_logged(self):
        """Testa conexão recusada registrada antes do erro"""
        def refuse(request):
            raise httpx.ConnectError("connection refused", request=request)

        log = []
        async with httpx.AsyncClient(transport=httpx.MockTransport(refuse)) as client:
            with pytest.raises(RemoteTransportError):
                await next_token_logprobs(endpoint(max_retries=1), "0", client, log)
        assert log[0].status is None
        assert log[0].error == "ConnectError"
        assert log[0].retries == 1

    @pytest.mark.asyncio
    async def test_auth_from_environment(self, monkeypatch):
        """Testa token lido da variável de ambiente"""
        monkeypatch.setenv("LAB_TEST_KEY", "k1")
        async with async_client(create_app(api_keys=["k1"])) as client:
            items = await next_token_logprobs(endpoint(auth_env="LAB_TEST_KEY"), "0", client)
        assert items[0].token == "0"

    @pytest.mark.asyncio
    async def test_rejected_credentials(self, monkeypatch):
        """Testa key recusada pelo servidor"""
        monkeypatch.setenv("LAB_TEST_KEY", "wrong")
        async with async_client(create_app(api_keys=["k1"])) as client:
            with pytest.raises(RemoteTransportError):
                await next_token_logprobs(endpoint(auth_env="LAB_TEST_KEY"), "0", client)

    @pytest.mark.asyncio
    async def test_missing_auth(self, monkeypatch):
        """Testa variável de ambiente ausente"""
        monkeypatch.delenv("LAB_MISSING_KEY", raising=False)
        with pytest.raises(AuthMissingError):
            await next_token_logprobs(endpoint(auth_env="LAB_MISSING_KEY"), "0")


class TestRemoteModel:
    """Testes dos experimentos sobre o adaptador remoto"""

    def test_nts_flip_detector(self):
        """Testa NTS máximo: qualquer perturbação muda o token"""
        model = remote(create_app(FlipDetector(), api_keys=[]))
        results = nts_zero(model, gammas=(0.1,), samples=6, length=20, seed=0)
        assert results[0].base_token == "0"
        assert results[0].nts == 6
        assert len(model.requests) == 7

    def test_nts_constant(self):
        """Testa NTS nulo com resposta constante"""
        model = remote(create_app(ConstantResponder({"0": -0.01, "1": -4.0}), api_keys=[]))
        assert nts_zero(model, gammas=(0.3,), samples=4, length=20)[0].nts == 0

    def test_periodic_continuation(self):
        """Testa sucesso em p = 3 e falha em p = 4"""
        model = remote(create_app(PeriodicContinuation(3), api_keys=[]))
        assert periodic_eval_one(model, 3, 4, 6).success
        assert not periodic_eval_one(model, 4, 4, 6).success

    def test_predict_order(self):
        """Testa resultados na ordem dos prompts"""
        model = remote(create_app(FlipDetector(), api_keys=[]), max_in_flight=2)
        tokens = [p.token for p in model.predict(["x: 000", "x: 010", "x: 000", "x: 100"])]
        assert tokens == ["0", "1", "0", "1"]


class TestPromptPairs:
    """Testes da sensibilidade em pares de prompts"""

    def test_constant_pairs(self):
        """Testa p_alpha = p_beta"""
        model = remote(create_app(api_keys=[]))
        rows = prompt_pair_sensitivity(model, [("0001", "0101")])
        assert rows[0].p_alpha == rows[0].p_beta
        assert not rows[0].sensitive

    def test_flip_pairs(self):
        """Testa par sensível"""
        model = remote(create_app(FlipDetector(), api_keys=[]))
        row = prompt_pair_sensitivity(model, [("x: 0000", "x: 0100")])[0]
        assert row.sigma == "0"
        assert row.sensitive
        assert row.p_beta == pytest.approx(exp(-3.0))

    def test_final_token_mismatch(self):
        """Testa par com caracteres finais diferentes"""
        model = remote(create_app(api_keys=[]))
        with pytest.raises(PreconditionError):
            prompt_pair_sensitivity(model, [("0001", "0000")])
