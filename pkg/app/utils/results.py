"""
Persistência de resultados: CSV com floats de 17 dígitos, JSON e RunManifest.
"""
from datetime import datetime, timezone
from hashlib import sha256
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union
import csv
import json
import logging

from app import __version__
from app.models.schemas import RequestRecord, RunManifest

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    """Formatação estável: floats com 17 dígitos significativos, bools em minúsculas"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    """
    Um header, colunas em ordem fixa, UTF-8, separador decimal "."

    Returns:
        Path: Caminho escrito
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        count = 0
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return path


def canonical_json(document: Any) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path: Union[str, Path], document: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def config_hash(config: Dict[str, Any]) -> str:
    return sha256(canonical_json(config).encode("utf-8")).hexdigest()


def run_directory(out: Union[str, Path], experiment: str, seed: int) -> Path:
    """out/<experiment>/<seed>/"""
    path = Path(out) / experiment / str(seed)
    path.mkdir(parents=True, exist_ok=True)
    return path


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(directory: Path, argv: List[str], experiment: str, config: Dict[str, Any], seed: int,
                   started_at: str, outputs: List[Path], requests: Optional[List[RequestRecord]] = None,
                   summary: Optional[Dict[str, Any]] = None) -> RunManifest:
    """
    Escreve manifest.json referenciando cada arquivo de resultado

    Auth tokens nunca entram aqui: só o nome da variável de ambiente
    aparece, via config.
    """
    manifest = RunManifest(
        command_line=list(argv),
        experiment=experiment,
        config_hash=config_hash(config),
        seed=seed,
        code_version=__version__,
        started_at=started_at,
        finished_at=utc_now(),
        outputs=[str(p) for p in outputs],
        requests=list(requests or []),
        summary=summary or {},
    )
    write_json(directory / "manifest.json", manifest.model_dump(mode="json"))
    return manifest
