"""Style images from local files or a text-to-image service, with a content-addressed cache.

The diffusion model is never run in-process. Generation goes through a
:class:`GenerationClient`; :class:`HttpGenerationClient` talks to a remote
endpoint and :class:`ProceduralClient` is a deterministic offline stand-in
that renders textures from the prompt and seed.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

API_KEY_ENV = "DIFFATTACK_GEN_API_KEY"
CACHE_DIR_ENV = "DIFFATTACK_CACHE_DIR"


class StyleSourceError(RuntimeError):
    pass


class GenerationError(StyleSourceError):
    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (after {retries} retries)" if retries else message)
        self.retries = retries


class EndpointNotConfigured(StyleSourceError):
    pass


@dataclass(frozen=True)
class StyleRequest:
    kind: str  # "prompt" | "file"
    prompt: str | None = None
    file_path: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind == "prompt":
            if not self.prompt or not self.prompt.strip():
                raise ValueError("prompt requests need a nonempty prompt")
            if self.file_path is not None:
                raise ValueError("prompt requests must not set file_path")
        elif self.kind == "file":
            if not self.file_path:
                raise ValueError("file requests need file_path")
            if self.prompt is not None:
                raise ValueError("file requests must not set prompt")
        else:
            raise ValueError(f"kind must be 'prompt' or 'file', got {self.kind!r}")

    @property
    def prompt_or_path(self) -> str:
        return self.prompt if self.kind == "prompt" else str(self.file_path)

    @property
    def cache_key(self) -> str:
        blob = json.dumps([self.kind, self.prompt_or_path, self.seed], separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class StyleAsset:
    image: np.ndarray = field(repr=False)  # H x W x 3 uint8
    provenance: str  # "generated" | "local"
    prompt_or_path: str
    cache_key: str
    path: Path | None = None


class GenerationClient(Protocol):
    calls: int

    def generate(self, prompt: str, seed: int) -> bytes:
        """Return encoded image bytes for ``prompt`` at ``seed``."""
        ...


def _decode_rgb(data: bytes, what: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA"):
                raise StyleSourceError(f"{what}: expected an RGB image, got mode {im.mode!r}")
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise StyleSourceError(f"{what}: could not decode image ({exc})") from exc


def _encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class HttpGenerationClient:
    """POSTs ``{"prompt", "seed", **params}`` as JSON to ``endpoint``.

    Accepts either a raw image body or JSON carrying base64 in ``image``,
    ``images[0]`` or ``data[0].b64_json``. Extra generation parameters pass
    through untouched.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        retries: int = 2,
        params: dict | None = None,
        session=None,
    ):
        import requests

        if not endpoint:
            raise EndpointNotConfigured("generation endpoint URL is not configured")
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        self.params = dict(params or {})
        self.session = session or requests.Session()
        self.calls = 0

    def generate(self, prompt: str, seed: int) -> bytes:
        import requests

        headers = {"Accept": "image/png, application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"prompt": prompt, "seed": seed, **self.params}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            self.calls += 1
            try:
                resp = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return self._extract(resp)
            except (requests.RequestException, ValueError, KeyError) as exc:
                last = exc
                log.warning("generation attempt %d/%d failed: %s", attempt + 1, self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(min(2.0**attempt, 10.0))
        raise GenerationError(f"generation service {self.endpoint} failed: {last}", retries=self.retries)

    @staticmethod
    def _extract(resp) -> bytes:
        ctype = resp.headers.get("Content-Type", "")
        if ctype.startswith("image/"):
            return resp.content
        body = resp.json()
        if "image" in body:
            b64 = body["image"]
        elif "images" in body:
            b64 = body["images"][0]
        else:
            b64 = body["data"][0]["b64_json"]
        return base64.b64decode(b64)


def procedural_texture(prompt: str, seed: int, size: int = 64) -> np.ndarray:
    """Deterministic texture keyed on ``(prompt, seed)``: oriented stripes, checks or blobs."""
    digest = hashlib.sha256(f"{prompt}\x00{seed}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    kind = digest[8] % 3
    if "stripe" in prompt.lower():
        kind = 0
    elif "check" in prompt.lower():
        kind = 1
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 9)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    if kind == 0:
        pattern = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * u))
    elif kind == 1:
        v = -np.sin(theta) * xx + np.cos(theta) * yy
        pattern = ((np.floor(freq * u) + np.floor(freq * v)) % 2).astype(np.float64)
    else:
        pattern = np.zeros_like(xx)
        for _ in range(6):
            cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
            pattern += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        pattern = np.clip(pattern, 0, 1)
    c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    img = c0[None, None, :] * (1 - pattern[..., None]) + c1[None, None, :] * pattern[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


class ProceduralClient:
    """Offline generation double. Prompts listed in ``fail_prompts`` raise :class:`GenerationError`."""

    def __init__(self, size: int = 64, fail_prompts: Sequence[str] = ()):
        self.size = size
        self.fail_prompts = set(fail_prompts)
        self.calls = 0

    def generate(self, prompt: str, seed: int) -> bytes:
        self.calls += 1
        if prompt in self.fail_prompts:
            raise GenerationError(f"offline double refused prompt {prompt!r}")
        return _encode_png(procedural_texture(prompt, seed, self.size))


class StyleCache:
    """``<root>/<key>.png`` plus ``<root>/<key>.json`` metadata, one pair per request key."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def png_path(self, key: str) -> Path:
        return self.root / f"{key}.png"

    def get(self, key: str) -> bytes | None:
        p = self.png_path(key)
        return p.read_bytes() if p.is_file() else None

    def put(self, key: str, png: bytes, meta: dict) -> Path:
        p = self.png_path(key)
        tmp = p.with_suffix(".png.tmp")
        tmp.write_bytes(png)
        tmp.replace(p)
        (self.root / f"{key}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_DIR_ENV, Path.home() / ".cache" / "diffattack" / "styles"))


class StyleSource:
    def __init__(self, client: GenerationClient | None = None, cache: StyleCache | None = None):
        self.client = client
        self.cache = cache if cache is not None else StyleCache(default_cache_dir())

    def resolve(self, request: StyleRequest) -> StyleAsset:
        if request.kind == "file":
            path = Path(request.file_path)
            if not path.is_file():
                raise StyleSourceError(f"style file not found: {path}")
            image = _decode_rgb(path.read_bytes(), str(path))
            return StyleAsset(image, "local", str(path), request.cache_key, path)

        key = request.cache_key
        with self.cache.lock(key):
            png = self.cache.get(key)
            if png is None:
                if self.client is None:
                    raise EndpointNotConfigured("no generation client configured for prompt requests")
                seed = 0 if request.seed is None else request.seed
                raw = self.client.generate(request.prompt, seed)
                # re-encode so the cached bytes are canonical PNG regardless of the service's format
                png = _encode_png(_decode_rgb(raw, f"generated image for {request.prompt!r}"))
                self.cache.put(
                    key, png,
                    {"prompt": request.prompt, "seed": request.seed, "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
                )
        image = _decode_rgb(png, f"cache entry {key}")
        return StyleAsset(image, "generated", request.prompt, key, self.cache.png_path(key))

    def batch_generate(
        self, prompts: Sequence[str], seeds: Sequence[int] = ()
    ) -> tuple[list[StyleAsset], dict[int, Exception]]:
        """Resolve each prompt independently.

        Returns the successful assets and a map from prompt index to error.
        Raises :class:`GenerationError` only when every item fails.
        """
        if not prompts:
            raise ValueError("batch_generate needs at least one prompt")
        if seeds and len(seeds) != len(prompts):
            raise ValueError(f"{len(seeds)} seeds for {len(prompts)} prompts")
        seeds = list(seeds) if seeds else list(range(len(prompts)))
        assets, errors = [], {}
        for i, (prompt, seed) in enumerate(zip(prompts, seeds)):
            try:
                assets.append(self.resolve(StyleRequest("prompt", prompt=prompt, seed=seed)))
            except (StyleSourceError, ValueError) as exc:
                log.warning("prompt %d (%r) failed: %s", i, prompt, exc)
                errors[i] = exc
        if not assets:
            raise GenerationError(f"all {len(prompts)} prompts failed: {errors}")
        return assets, errors


def resolve_style(request: StyleRequest, source: StyleSource) -> StyleAsset:
    return source.resolve(request)


def batch_generate(prompts: Sequence[str], seeds: Sequence[int], source: StyleSource):
    return source.batch_generate(prompts, seeds)
