from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from slowapi import Limiter, _rate_limit_exceeded_handler
from slowapi.util import get_remote_address
from slowapi.errors import RateLimitExceeded
from slowapi.middleware import SlowAPIMiddleware
from typing import List, Optional
import logging
import time

from app.config import get_settings
from app.api import routes
from app.api.responders import ConstantResponder, Responder

logger = logging.getLogger(__name__)
settings = get_settings()


def create_app(
    responder: Optional[Responder] = None,
    omit_logprobs: bool = False,
    fail_first: int = 0,
    api_keys: Optional[List[str]] = None,
    rate_limit_per_minute: Optional[int] = None,
) -> FastAPI:
    """
    Servidor mock compatível com a API de completions

    Args:
        responder: prompt -> {token: logprob}; ConstantResponder se None
        omit_logprobs: Responde sem o campo logprobs (servidor incompatível)
        fail_first: Número de 503 injetados antes de responder normalmente
        api_keys: Keys aceitas; lista vazia desliga a autenticação
        rate_limit_per_minute: Limite por IP (0 desliga)

    Returns:
        FastAPI: aplicação pronta para uvicorn ou httpx.ASGITransport
    """
    rate_limit = settings.MOCK_RATE_LIMIT_PER_MINUTE if rate_limit_per_minute is None else rate_limit_per_minute

    app = FastAPI(
        title=f"{settings.PROJECT_NAME} mock endpoint",
        version=settings.VERSION,
        description="""
    Deterministic completions endpoint for exercising the remote adapter.

    ## Authentication
    When keys are configured, include one in the Authorization header:
    ```
    Authorization: Bearer your-api-key-here
    ```
    """,
        docs_url="/docs",
        redoc_url="/redoc",
        openapi_url="/openapi.json"
    )

    app.state.responder = responder or ConstantResponder()
    app.state.omit_logprobs = omit_logprobs
    app.state.failures_left = fail_first
    app.state.api_keys = settings.mock_api_keys_list if api_keys is None else list(api_keys)
    app.state.started = time.time()

    # Middleware: Rate Limiting
    if rate_limit > 0:
        app.state.limiter = Limiter(key_func=get_remote_address, default_limits=[f"{rate_limit}/minute"])
        app.add_middleware(SlowAPIMiddleware)
        app.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)

    # Middleware: CORS
    app.add_middleware(
        CORSMiddleware,
        allow_origins=settings.cors_origins_list,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    # Middleware: Request timing e logging
    @app.middleware("http")
    async def add_process_time_header(request: Request, call_next):
        """
        Middleware para medir tempo de resposta e logging
        """
        start_time = time.time()
        logger.debug(f"Request: {request.method} {request.url.path}")

        try:
            response = await call_next(request)

            process_time = (time.time() - start_time) * 1000  # ms
            response.headers["X-Process-Time-Ms"] = str(round(process_time, 2))

            logger.debug(
                f"Response: {request.method} {request.url.path} - "
                f"Status: {response.status_code} - Time: {process_time:.2f}ms"
            )
            return response

        except Exception as e:
            logger.error(f"Request failed: {request.method} {request.url.path} - Error: {str(e)}")
            raise

    @app.exception_handler(404)
    async def not_found_handler(request: Request, exc):
        """Handler para 404 Not Found"""
        return JSONResponse(
            status_code=404,
            content={
                "success": False,
                "error": "Endpoint not found",
                "error_code": "NOT_FOUND",
                "path": str(request.url.path)
            }
        )

    @app.exception_handler(500)
    async def internal_error_handler(request: Request, exc):
        """Handler para 500 Internal Server Error"""
        logger.error(f"Internal server error: {str(exc)}", exc_info=True)
        return JSONResponse(
            status_code=500,
            content={
                "success": False,
                "error": "Internal server error",
                "error_code": "INTERNAL_ERROR",
                "detail": str(exc) if settings.DEBUG else "An error occurred"
            }
        )

    @app.on_event("startup")
    async def startup_event():
        logger.info("=" * 50)
        logger.info(f"Starting {settings.PROJECT_NAME} mock endpoint v{settings.VERSION}")
        logger.info(f"Responder: {app.state.responder.name}")
        logger.info(f"Auth: {'on' if app.state.api_keys else 'off'}")
        logger.info(f"Rate Limit: {rate_limit or 'off'}/min")
        logger.info("=" * 50)

    app.include_router(routes.router, prefix=settings.API_V1_PREFIX, tags=["API v1"])

    @app.get("/", tags=["Root"])
    async def root():
        return {
            "message": f"Welcome to the {settings.PROJECT_NAME} mock endpoint",
            "version": settings.VERSION,
            "status": "online",
            "endpoints": {
                "health": f"{settings.API_V1_PREFIX}/health",
                "completions": f"{settings.API_V1_PREFIX}/completions",
                "chat": f"{settings.API_V1_PREFIX}/chat/completions",
            }
        }

    return app


def serve(responder: Responder, host: Optional[str] = None, port: Optional[int] = None) -> None:
    import uvicorn

    uvicorn.run(
        create_app(responder),
        host=host or settings.MOCK_HOST,
        port=port or settings.MOCK_PORT,
        log_level=settings.LOG_LEVEL.lower()
    )
