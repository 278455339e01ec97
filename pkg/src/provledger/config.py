"""Plain-text ``key=value`` configuration files."""

from __future__ import annotations

from pathlib import Path

from .errors import BadConfig


class Config(dict):
    """A parsed config; relative paths resolve against the file's directory."""

    def __init__(self, values=(), base_dir: Path | None = None, source: str = "<config>"):
        super().__init__(values)
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.source = source

    def require(self, name: str) -> str:
        try:
            return self[name]
        except KeyError:
            raise BadConfig(f"{self.source}: missing required key {name!r}") from None

    def path(self, name: str, default: str | None = None) -> Path | None:
        raw = self.get(name, default) if default is not None else self.require(name)
        if raw is None:
            return None
        p = Path(raw).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    def int(self, name: str, default: int) -> int:
        try:
            return int(self.get(name, default))
        except ValueError:
            raise BadConfig(f"{self.source}: {name} must be an integer") from None

    def float(self, name: str, default: float) -> float:
        try:
            return float(self.get(name, default))
        except ValueError:
            raise BadConfig(f"{self.source}: {name} must be a number") from None

    def list(self, name: str) -> list[str]:
        return [v.strip() for v in self.get(name, "").split(",") if v.strip()]


def parse_config(text: str, base_dir=None, source: str = "<config>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise BadConfig(f"{source}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return Config(values, base_dir, source)


def load_config(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, p.parent, str(p))


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))
