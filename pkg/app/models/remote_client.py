"""
Cliente para endpoints compatíveis com a API de completions.

Uma requisição por predição (max_tokens=1, temperature=0, top-K logprobs),
com retry exponencial em 429/5xx e erros de transporte.
"""
from hashlib import sha256
from typing import Dict, List, Optional, Sequence, Tuple
import asyncio
import logging
import time

import httpx
import numpy as np
from pydantic import ValidationError
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.config import get_settings
from app.core.exceptions import (
    IncompatibleServerError,
    PreconditionError,
    RemoteTransportError,
)
from app.core.experiments import Prediction
from app.core.numeric import Dist
from app.core.security import resolve_auth_token
from app.core.sequences import Alphabet
from app.models.schemas import EndpointConfig, PromptPairRow, RequestRecord, TokenLogprob

logger = logging.getLogger(__name__)
settings = get_settings()

RETRY_STATUSES = {429, 500, 502, 503, 504}
OTHER = "?"
REMOTE_ALPHABET = Alphabet(("0", "1", OTHER))


class _TransientStatus(Exception):
    def __init__(self, status: int):
        super().__init__(f"HTTP {status}")
        self.status = status


def prompt_digest(prompt: str) -> str:
    return sha256(prompt.encode("utf-8")).hexdigest()


def _request_body(endpoint: EndpointConfig, prompt: str) -> Tuple[str, Dict]:
    base = endpoint.base_url.rstrip("/")
    if endpoint.api == "chat":
        return f"{base}/v1/chat/completions", {
            "model": endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": True,
            "top_logprobs": endpoint.top_k,
        }
    return f"{base}/v1/completions", {
        "model": endpoint.model,
        "prompt": prompt,
        "max_tokens": 1,
        "temperature": 0.0,
        "logprobs": endpoint.top_k,
    }


def parse_top_logprobs(payload: Dict, api: str = "completions") -> List[TokenLogprob]:
    """
    Extrai a lista top-K da primeira posição gerada, ordenada por logprob

    Raises:
        IncompatibleServerError: qualquer caminho ausente ou valor inválido
    """
    try:
        choice = payload["choices"][0]
        if api == "chat":
            entries = [(item["token"], item["logprob"]) for item in choice["logprobs"]["content"][0]["top_logprobs"]]
        else:
            entries = list(choice["logprobs"]["top_logprobs"][0].items())
    except (KeyError, IndexError, TypeError, AttributeError) as e:
        raise IncompatibleServerError(f"Response has no top logprobs (missing {e})")
    try:
        items = [TokenLogprob(token=token, logprob=logprob) for token, logprob in entries]
    except ValidationError as e:
        raise IncompatibleServerError(f"Invalid logprob entry: {e}")
    if not items:
        raise IncompatibleServerError("Response has an empty top-logprob list")
    return sorted(items, key=lambda item: -item.logprob)


async def next_token_logprobs(endpoint: EndpointConfig, prompt: str,
                              client: Optional[httpx.AsyncClient] = None,
                              request_log: Optional[List[RequestRecord]] = None) -> List[TokenLogprob]:
    """
    Top-K logprobs do próximo token para `prompt`

    Args:
        endpoint: Configuração do endpoint
        prompt: Texto completo enviado
        client: Cliente httpx compartilhado (um novo é criado se None)
        request_log: Lista onde o registro da requisição é anexado

    Returns:
        List[TokenLogprob]: do mais para o menos provável

    Raises:
        AuthMissingError: token não encontrado no ambiente
        RemoteTransportError: falha HTTP após os retries
        IncompatibleServerError: resposta sem logprobs ou endpoint inexistente
    """
    token = resolve_auth_token(endpoint.auth_env)
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url, body = _request_body(endpoint, prompt)

    own_client = client is None
    if own_client:
        client = httpx.AsyncClient(timeout=endpoint.timeout)

    start = time.perf_counter()
    attempts = 0

    def record(status: Optional[int], error: Optional[str] = None) -> None:
        if request_log is not None:
            request_log.append(RequestRecord(
                prompt_sha256=prompt_digest(prompt),
                latency_ms=round((time.perf_counter() - start) * 1000, 3),
                retries=max(attempts - 1, 0),
                status=status,
                error=error,
            ))

    try:
        retrying = AsyncRetrying(
            stop=stop_after_attempt(endpoint.max_retries + 1),
            wait=wait_exponential(multiplier=endpoint.backoff, max=settings.REMOTE_BACKOFF_MAX_SECONDS),
            retry=retry_if_exception_type((httpx.TransportError, _TransientStatus)),
            reraise=True,
        )
        async for attempt in retrying:
            with attempt:
                attempts = attempt.retry_state.attempt_number
                response = await client.post(url, json=body, headers=headers, timeout=endpoint.timeout)
                if response.status_code in RETRY_STATUSES:
                    logger.warning(f"Transient HTTP {response.status_code} from {url} (attempt {attempts})")
                    raise _TransientStatus(response.status_code)
    except _TransientStatus as e:
        record(e.status, "retries-exhausted")
        raise RemoteTransportError(f"HTTP {e.status} from {url} after {attempts} attempts")
    except httpx.TransportError as e:
        record(None, type(e).__name__)
        raise RemoteTransportError(f"Transport error for {url} after {attempts} attempts: {e}")
    finally:
        if own_client:
            await client.aclose()

    record(response.status_code)

    if response.status_code == 404:
        raise IncompatibleServerError(f"Endpoint {url} not found")
    if response.status_code in (401, 403):
        raise RemoteTransportError(f"Endpoint rejected credentials (HTTP {response.status_code})")
    if response.status_code >= 400:
        raise RemoteTransportError(f"HTTP {response.status_code} from {url}: {response.text[:200]}")
    try:
        payload = response.json()
    except ValueError:
        raise IncompatibleServerError(f"Non-JSON response from {url}")
    return parse_top_logprobs(payload, endpoint.api)


# ---------------------------------------------------------------------------
# NextTokenModel adapter
# ---------------------------------------------------------------------------

def binary_dist(top: Sequence[TokenLogprob]) -> Tuple[Dist, bool]:
    """
    Dist sobre ("0", "1", "?"); tokens fora do top-K contam como 0

    Returns:
        (dist, truncated): truncated indica "0" ou "1" ausente do top-K
    """
    mass = {"0": 0.0, "1": 0.0}
    seen = set()
    for item in top:
        key = item.token.strip()
        if key in mass:
            mass[key] += item.prob
            seen.add(key)
    p0, p1 = min(mass["0"], 1.0), min(mass["1"], 1.0)
    other = max(0.0, 1.0 - p0 - p1)
    probs = np.array([p0, p1, other], dtype=np.float64)
    return Dist(probs / probs.sum()), seen != {"0", "1"}


def greedy_token(top: Sequence[TokenLogprob]) -> str:
    key = top[0].token.strip()
    return key if key in ("0", "1") else OTHER


class RemoteNextTokenModel:
    """
    NextTokenModel sobre um endpoint remoto

    Qualquer token gerado fora de "0"/"1" vira "?" e conta como divergência.
    """

    uses_instructions = True
    alphabet = REMOTE_ALPHABET

    def __init__(self, endpoint: EndpointConfig, transport: Optional[httpx.AsyncBaseTransport] = None):
        self.endpoint = endpoint
        self.transport = transport
        self.requests: List[RequestRecord] = []
        self.truncated = 0

    def _client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(timeout=self.endpoint.timeout, transport=self.transport)

    async def top_logprobs(self, prompts: Sequence[str]) -> List[List[TokenLogprob]]:
        """Requisições concorrentes (até max_in_flight), resultados na ordem dos prompts"""
        semaphore = asyncio.Semaphore(self.endpoint.max_in_flight)
        logs: List[List[RequestRecord]] = [[] for _ in prompts]

        try:
            async with self._client() as client:
                async def one(index: int, prompt: str) -> List[TokenLogprob]:
                    async with semaphore:
                        return await next_token_logprobs(self.endpoint, prompt, client, logs[index])

                results = await asyncio.gather(*(one(i, p) for i, p in enumerate(prompts)))
        finally:
            for records in logs:
                self.requests.extend(records)
        return list(results)

    def predict(self, prompts: Sequence[str]) -> List[Prediction]:
        predictions = []
        for top in asyncio.run(self.top_logprobs(prompts)):
            dist, truncated = binary_dist(top)
            self.truncated += truncated
            predictions.append(Prediction(greedy_token(top), dist))
        return predictions

    def generate(self, prompt: str, steps: int) -> Tuple[str, List[Dist]]:
        """Gulosa, um token por requisição; para no primeiro token fora de "0"/"1" """
        generated = ""
        dists: List[Dist] = []
        for _ in range(steps):
            prediction = self.predict([prompt + generated])[0]
            dists.append(prediction.dist)
            generated += prediction.token
            if prediction.token == OTHER:
                logger.info(f"Generation stopped after {len(generated)} tokens: non-binary token")
                break
        return generated, dists


# ---------------------------------------------------------------------------
# Prompt-pair sensitivity
# ---------------------------------------------------------------------------

PAIR_COLUMNS = ("index", "sigma", "p_alpha", "p_beta", "truncated", "sensitive")


def _check_pairs(pairs: Sequence[Tuple[str, str]]) -> None:
    for index, (alpha, beta) in enumerate(pairs):
        if not alpha or not beta:
            raise PreconditionError(f"Pair {index} has an empty prompt")
        if alpha[-1] != beta[-1]:
            raise PreconditionError(f"Pair {index} does not share its final token "
                                    f"({alpha[-1]!r} vs {beta[-1]!r})")


def pair_row(alpha_top: Sequence[TokenLogprob], beta_top: Sequence[TokenLogprob]) -> PromptPairRow:
    sigma = alpha_top[0]
    by_token = {item.token: item for item in beta_top}
    truncated = sigma.token not in by_token
    p_beta = 0.0 if truncated else by_token[sigma.token].prob
    return PromptPairRow(
        sigma=sigma.token,
        p_alpha=min(sigma.prob, 1.0),
        p_beta=min(p_beta, 1.0),
        truncated=truncated,
        sensitive=beta_top[0].token != sigma.token,
    )


def prompt_pair_sensitivity(model: RemoteNextTokenModel, pairs: Sequence[Tuple[str, str]],
                            seed: int = 0) -> List[PromptPairRow]:
    """
    (P(sigma|alpha), P(sigma|beta)) com sigma = token guloso sob alpha

    `seed` só entra no manifesto; as requisições são determinísticas.

    Raises:
        PreconditionError: par sem o mesmo caractere final
    """
    _check_pairs(pairs)
    prompts = [text for pair in pairs for text in pair]
    tops = asyncio.run(model.top_logprobs(prompts))
    rows = [pair_row(tops[2 * i], tops[2 * i + 1]) for i in range(len(pairs))]
    sensitive = sum(row.sensitive for row in rows)
    logger.info(f"Prompt pairs: {sensitive}/{len(rows)} sensitive (seed={seed})")
    return rows
