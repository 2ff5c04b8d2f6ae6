from fastapi import APIRouter, Depends, Request
from fastapi.responses import JSONResponse
from typing import Dict, List, Optional
from hashlib import sha256
import logging
import time

from app.models.schemas import ChatCompletionRequest, CompletionRequest, HealthResponse
from app.core.security import verify_api_key
from app.config import get_settings

logger = logging.getLogger(__name__)
router = APIRouter()
settings = get_settings()

# Variável para tracking de uptime
_start_time = time.time()


def _top(request: Request, prompt: str, k: int) -> List[tuple]:
    """Top-k (token, logprob) do responder, ordenado e determinístico"""
    logprobs: Dict[str, float] = request.app.state.responder(prompt)
    ranked = sorted(logprobs.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:max(1, k)]


def _transient_failure(request: Request) -> Optional[JSONResponse]:
    """Devolve 503 enquanto app.state.failures_left > 0"""
    if request.app.state.failures_left > 0:
        request.app.state.failures_left -= 1
        logger.warning(f"Injected failure ({request.app.state.failures_left} left)")
        return JSONResponse(
            status_code=503,
            content={"success": False, "error": "Service unavailable", "error_code": "INJECTED_FAILURE"},
        )
    return None


def _completion_id(prompt: str) -> str:
    return "cmpl-mock-" + sha256(prompt.encode("utf-8")).hexdigest()[:12]


@router.get("/health", response_model=HealthResponse, tags=["Health"])
async def health_check(request: Request):
    """
    Health check endpoint
    """
    return HealthResponse(
        status="healthy",
        version=settings.VERSION,
        responder=request.app.state.responder.name,
        uptime_seconds=time.time() - _start_time
    )


@router.post("/completions", tags=["Completions"])
async def completions(body: CompletionRequest, request: Request, _key: Optional[str] = Depends(verify_api_key)):
    """
    Completions com logprobs do primeiro token gerado

    O mock ignora temperature e max_tokens: sempre um token guloso.
    """
    failure = _transient_failure(request)
    if failure is not None:
        return failure

    top = _top(request, body.prompt, body.logprobs or 1)
    token, logprob = top[0]
    choice = {"index": 0, "text": token, "finish_reason": "length"}
    if body.logprobs is not None and not request.app.state.omit_logprobs:
        choice["logprobs"] = {
            "tokens": [token],
            "token_logprobs": [logprob],
            "top_logprobs": [dict(top)],
        }
    else:
        choice["logprobs"] = None

    return {
        "id": _completion_id(body.prompt),
        "object": "text_completion",
        "created": int(request.app.state.started),
        "model": body.model,
        "choices": [choice],
    }


@router.post("/chat/completions", tags=["Completions"])
async def chat_completions(body: ChatCompletionRequest, request: Request,
                           _key: Optional[str] = Depends(verify_api_key)):
    """
    Chat completions: o prompt é o conteúdo da última mensagem
    """
    failure = _transient_failure(request)
    if failure is not None:
        return failure

    prompt = body.messages[-1].content if body.messages else ""
    top = _top(request, prompt, body.top_logprobs or 1)
    token, logprob = top[0]
    choice = {
        "index": 0,
        "message": {"role": "assistant", "content": token},
        "finish_reason": "length",
        "logprobs": None,
    }
    if body.logprobs and not request.app.state.omit_logprobs:
        choice["logprobs"] = {
            "content": [{
                "token": token,
                "logprob": logprob,
                "top_logprobs": [{"token": t, "logprob": lp} for t, lp in top],
            }]
        }

    return {
        "id": _completion_id(prompt),
        "object": "chat.completion",
        "created": int(request.app.state.started),
        "model": body.model,
        "choices": [choice],
    }
