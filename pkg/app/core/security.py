from typing import Optional
from fastapi import HTTPException, Request, Security, status
from fastapi.security import HTTPBearer, HTTPAuthorizationCredentials
import logging
import os

from app.core.exceptions import AuthMissingError

logger = logging.getLogger(__name__)

# auto_error=False: sem chaves configuradas o mock aceita qualquer requisição
security_scheme = HTTPBearer(auto_error=False)


async def verify_api_key(
    request: Request,
    credentials: Optional[HTTPAuthorizationCredentials] = Security(security_scheme)
) -> Optional[str]:
    """
    Valida API key do header Authorization: Bearer <key>

    Args:
        request: Requisição (as chaves aceitas ficam em app.state.api_keys)
        credentials: Credenciais do header

    Returns:
        Optional[str]: A key validada, ou None se a autenticação estiver desligada

    Raises:
        HTTPException: Se a key estiver ausente ou inválida
    """
    api_keys = getattr(request.app.state, "api_keys", [])
    if not api_keys:
        return None

    if credentials is None:
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Missing API key",
            headers={"WWW-Authenticate": "Bearer"},
        )

    api_key = credentials.credentials
    if api_key not in api_keys:
        logger.warning(f"Invalid API key attempted: {api_key[:10]}...")
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid API key",
            headers={"WWW-Authenticate": "Bearer"},
        )

    return api_key


def resolve_auth_token(env_name: Optional[str]) -> Optional[str]:
    """
    Lê o token do cliente remoto de uma variável de ambiente

    Raises:
        AuthMissingError: variável nomeada mas ausente/vazia
    """
    if env_name is None:
        return None
    token = os.environ.get(env_name)
    if not token:
        raise AuthMissingError(f"Environment variable {env_name} is not set")
    return token
