"""Instruction-driven music QA dataset generation.

Each annotated track yields exactly nine QA pairs: four answers to the
canonical question set plus five open-ended pairs, all produced by a chat
backend prompted with the track's caption (preferred) or tag list. The
builder stages completed tracks in an append-only parts file so an
interrupted run resumes without repeating backend calls, and the final
dataset is rewritten in canonical order so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .errors import (
    BackendError,
    ConfigError,
    GenerationError,
    InputError,
    ParseError,
)

FIXED_QUESTIONS = (
    "Describe the music",
    "Describe the music in detail",
    "What do you hear in the audio",
    "What can be inferred from the audio",
)

ORIGINS = ("fixed_question", "open_ended")
SOURCES = ("caption", "tags")
PAIRS_PER_TRACK = 9


def fixed_question_set() -> tuple[str, ...]:
    """The four canonical questions, in their fixed order."""
    return FIXED_QUESTIONS


@dataclass(frozen=True)
class TrackAnnotation:
    """Raw annotation for one track: a caption, a tag list, or both."""

    track_id: str
    caption: str | None = None
    tags: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.track_id or not self.track_id.strip():
            raise InputError("track_id must be non-empty")
        if self.caption is not None and not self.caption.strip():
            raise InputError(f"{self.track_id}: caption present but blank")
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(self.tags))
            if not self.tags or any(not t.strip() for t in self.tags):
                raise InputError(f"{self.track_id}: tags must be non-empty strings")
        if self.caption is None and self.tags is None:
            raise InputError(f"{self.track_id}: need a caption or tags")

    @property
    def source(self) -> str:
        return "caption" if self.caption is not None else "tags"

    @property
    def description(self) -> str:
        if self.caption is not None:
            return self.caption
        return ", ".join(self.tags)


@dataclass(frozen=True)
class QAPair:
    track_id: str
    question: str
    answer: str
    origin: str
    source: str

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise InputError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.source not in SOURCES:
            raise InputError(f"source must be one of {SOURCES}, got {self.source!r}")
        if not self.question.strip() or not self.answer.strip():
            raise InputError(f"{self.track_id}: question and answer must be non-empty")

    def to_dict(self) -> dict:
        return {"track_id": self.track_id, "question": self.question,
                "answer": self.answer, "origin": self.origin,
                "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        return cls(track_id=d["track_id"], question=d["question"],
                   answer=d["answer"], origin=d["origin"], source=d["source"])


@dataclass(frozen=True)
class InstructionTemplate:
    """Prompt template with a single {description} slot."""

    name: str
    text: str

    def __post_init__(self):
        n = self.text.count("{description}")
        if n != 1:
            raise ConfigError(
                f"template {self.name!r} must contain {{description}} exactly "
                f"once, found {n}")

    def render(self, description: str) -> str:
        return self.text.replace("{description}", description)


def load_templates() -> dict[str, InstructionTemplate]:
    """The stock templates shipped with the package, editable as plain text."""
    out = {}
    root = resources.files("tuneqa").joinpath("templates")
    for name in ("fixed_answers", "open_pairs"):
        text = root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
        out[name] = InstructionTemplate(name=name, text=text)
    return out


# ---------------------------------------------------------------------------
# numbered-list parsing
# ---------------------------------------------------------------------------

_ITEM_RE = re.compile(r"\s*(\d+)[.)]\s*(.*)")
_PAIR_RE = re.compile(r"^(?:Q\s*:)?\s*(.*?)\s*A\s*:\s*(.*)$")

PARSE_MODES = ("four_answers", "five_pairs")
_EXPECTED_COUNT = {"four_answers": 4, "five_pairs": 5}


def _numbered_items(raw: str) -> list[str]:
    items: list[str] = []
    numbers: list[int] = []
    for line in raw.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            numbers.append(int(m.group(1)))
            items.append(m.group(2).strip())
        elif items and line.strip():
            items[-1] = (items[-1] + " " + line.strip()).strip()
    if not items:
        raise ParseError("no numbered list items found", raw=raw)
    if numbers != list(range(1, len(items) + 1)):
        raise ParseError(f"list numbering {numbers} is not 1..{len(items)}",
                         raw=raw)
    return items


def parse_backend_output(raw: str, mode: str):
    """Extract a numbered list from backend text.

    Returns a list of 4 answer strings for mode "four_answers", or a list
    of 5 (question, answer) tuples for mode "five_pairs". The count is
    exact and empty items are rejected; anything else is a ParseError.
    """
    if mode not in PARSE_MODES:
        raise ConfigError(f"mode must be one of {PARSE_MODES}, got {mode!r}")
    items = _numbered_items(raw)
    want = _EXPECTED_COUNT[mode]
    if len(items) != want:
        raise ParseError(f"expected {want} items, got {len(items)}", raw=raw)
    if mode == "four_answers":
        for i, item in enumerate(items, 1):
            if not item:
                raise ParseError(f"item {i} is empty", raw=raw)
        return items
    pairs = []
    for i, item in enumerate(items, 1):
        m = _PAIR_RE.match(item)
        if not m or not m.group(1).strip() or not m.group(2).strip():
            raise ParseError(f"item {i} is not a 'Q: ... A: ...' pair: {item!r}",
                             raw=raw)
        pairs.append((m.group(1).strip(), m.group(2).strip()))
    return pairs


# ---------------------------------------------------------------------------
# chat backends
# ---------------------------------------------------------------------------

class LLMBackend(ABC):
    """Minimal chat client: one prompt in, one text completion out."""

    name: str = "abstract"

    @abstractmethod
    def chat(self, prompt: str) -> str:
        """Return the completion text. Raise BackendError on failure."""


def complete_with_retry(backend: LLMBackend, prompt: str, retries: int = 3,
                        base_delay: float = 0.5,
                        sleep: Callable[[float], None] = time.sleep) -> str:
    """chat() with up to `retries` retries on BackendError, delays doubling."""
    attempts = retries + 1
    for attempt in range(attempts):
        try:
            return backend.chat(prompt)
        except BackendError:
            if attempt == attempts - 1:
                raise
            sleep(base_delay * (2 ** attempt))
    raise AssertionError("unreachable")


_MOODS = ("calm", "upbeat", "somber", "dreamy", "tense", "joyful", "mellow",
          "driving")
_INSTRUMENTS = ("piano", "guitar", "strings", "synth pads", "drums", "flute",
                "bass", "organ")
_TEMPI = ("slow", "moderate", "brisk", "fast")
_GENRES = ("ambient", "folk", "electronic", "jazz", "classical", "rock")
_TONES = ("warm", "bright", "dark", "airy")


class MockBackend(LLMBackend):
    """Deterministic offline backend.

    The reply is a pure function of the prompt text (seeded from its
    sha256), shaped to satisfy the stock templates: it reads the requested
    list length from "exactly N" and emits Q/A lines when the prompt asks
    for question and answer pairs.
    """

    name = "mock"

    def __init__(self):
        self._lock = threading.Lock()
        self.num_calls = 0

    def chat(self, prompt: str) -> str:
        with self._lock:
            self.num_calls += 1
        m = re.search(r"exactly (\d+)", prompt)
        if not m:
            raise BackendError("mock backend needs an 'exactly N' instruction")
        count = int(m.group(1))
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        import numpy as np

        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        mood = _MOODS[rng.integers(len(_MOODS))]
        instr = _INSTRUMENTS[rng.integers(len(_INSTRUMENTS))]
        tempo = _TEMPI[rng.integers(len(_TEMPI))]
        genre = _GENRES[rng.integers(len(_GENRES))]
        tone = _TONES[rng.integers(len(_TONES))]
        if "question and answer pair" in prompt:
            lines = [
                f"1. Q: What mood does the music convey? A: It feels {mood}.",
                f"2. Q: Which instruments stand out? A: Mostly {instr}.",
                f"3. Q: How fast is the piece? A: The tempo is {tempo}.",
                f"4. Q: What genre does it resemble? A: It leans toward {genre}.",
                f"5. Q: How would you describe the overall tone? A: The tone is {tone}.",
            ]
        else:
            lines = [
                f"1. A {mood} {genre} piece.",
                f"2. A {mood} {genre} piece led by {instr} at a {tempo} tempo, "
                f"{tone} in tone.",
                f"3. Mainly {instr} over a {tempo} pulse.",
                f"4. The music suggests a {mood} mood.",
            ]
        return "\n".join(lines[:count])


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for a remote chat service.

    The auth token is read from the environment variable named by
    token_env at call time and never stored or serialized.
    """

    endpoint: str
    model: str
    token_env: str = "TUNEQA_BACKEND_TOKEN"
    timeout: float = 30.0

    def __post_init__(self):
        if not self.endpoint.startswith(("http://", "https://")):
            raise ConfigError(f"endpoint must be an http(s) URL, got {self.endpoint!r}")
        if not self.model:
            raise ConfigError("model name must be non-empty")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")


class RemoteBackend(LLMBackend):
    """Chat-completions client for an OpenAI-style HTTP endpoint."""

    name = "remote"

    def __init__(self, config: BackendConfig):
        self.config = config

    def _token(self) -> str:
        token = os.environ.get(self.config.token_env, "")
        if not token:
            raise BackendError(
                f"auth token environment variable {self.config.token_env} is "
                f"not set")
        return token

    def chat(self, prompt: str) -> str:
        import requests

        payload = {"model": self.config.model,
                   "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {self._token()}",
                   "Content-Type": "application/json"}
        try:
            response = requests.post(self.config.endpoint, json=payload,
                                     headers=headers,
                                     timeout=self.config.timeout)
        except requests.RequestException as err:
            raise BackendError(f"request to {self.config.endpoint} failed: {err}")
        if response.status_code != 200:
            raise BackendError(
                f"backend returned HTTP {response.status_code}: "
                f"{response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as err:
            raise BackendError(f"malformed backend response: {err}")


def make_backend(kind: str, config: BackendConfig | None = None) -> LLMBackend:
    if kind == "mock":
        return MockBackend()
    if kind == "remote":
        if config is None:
            raise ConfigError("remote backend needs endpoint and model settings")
        return RemoteBackend(config)
    raise ConfigError(f"backend must be 'mock' or 'remote', got {kind!r}")


# ---------------------------------------------------------------------------
# per-track generation
# ---------------------------------------------------------------------------

def generate_for_track(annotation: TrackAnnotation, backend: LLMBackend,
                       templates: dict[str, InstructionTemplate] | None = None,
                       retries: int = 3,
                       sleep: Callable[[float], None] = time.sleep) -> list[QAPair]:
    """Exactly nine pairs for one track, or GenerationError.

    Backend failures are retried; a reply that does not parse fails the
    track immediately (retrying an identical prompt cannot fix a
    deterministic parse problem, and a flaky one surfaces on the next run).
    """
    templates = templates or load_templates()
    description = annotation.description
    source = annotation.source
    pairs: list[QAPair] = []
    try:
        raw = complete_with_retry(
            backend, templates["fixed_answers"].render(description),
            retries=retries, sleep=sleep)
        answers = parse_backend_output(raw, "four_answers")
        for question, answer in zip(FIXED_QUESTIONS, answers):
            pairs.append(QAPair(track_id=annotation.track_id, question=question,
                                answer=answer, origin="fixed_question",
                                source=source))
        raw = complete_with_retry(
            backend, templates["open_pairs"].render(description),
            retries=retries, sleep=sleep)
        for question, answer in parse_backend_output(raw, "five_pairs"):
            pairs.append(QAPair(track_id=annotation.track_id, question=question,
                                answer=answer, origin="open_ended",
                                source=source))
    except (BackendError, ParseError, InputError) as err:
        raise GenerationError(f"{type(err).__name__}: {err}",
                              track_id=annotation.track_id)
    assert len(pairs) == PAIRS_PER_TRACK
    return pairs


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def read_annotations(path: str | Path) -> list[TrackAnnotation]:
    """Load annotations from JSONL; duplicate track ids are an error."""
    out: list[TrackAnnotation] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as err:
                raise InputError(f"{path}:{lineno}: invalid JSON: {err}")
            try:
                ann = TrackAnnotation(
                    track_id=d.get("track_id", ""),
                    caption=d.get("caption"),
                    tags=tuple(d["tags"]) if d.get("tags") is not None else None)
            except (InputError, TypeError) as err:
                raise InputError(f"{path}:{lineno}: {err}")
            if ann.track_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate track_id "
                                 f"{ann.track_id!r}")
            seen.add(ann.track_id)
            out.append(ann)
    return out


def write_dataset(path: str | Path, pairs: Sequence[QAPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_dict(), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> list[QAPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QAPair.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as err:
                raise InputError(f"{path}:{lineno}: bad dataset line: {err}")
    return out


@dataclass
class GenerationManifest:
    """Summary of one build: counts plus per-track failures."""

    backend: str
    num_tracks_requested: int
    num_tracks_completed: int
    num_pairs: int
    per_origin: dict[str, int]
    per_source: dict[str, int]
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"backend": self.backend,
                "num_tracks_requested": self.num_tracks_requested,
                "num_tracks_completed": self.num_tracks_completed,
                "num_pairs": self.num_pairs,
                "per_origin": dict(sorted(self.per_origin.items())),
                "per_source": dict(sorted(self.per_source.items())),
                "failures": self.failures}


def _parts_path(output_path: Path) -> Path:
    return output_path.with_name(output_path.name + ".parts")


def _load_parts(path: Path) -> dict[str, list[QAPair]]:
    done: dict[str, list[QAPair]] = {}
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                d = json.loads(line)
                done[d["track_id"]] = [QAPair.from_dict(p) for p in d["pairs"]]
            except (json.JSONDecodeError, KeyError, InputError):
                continue  # a torn final line from an interrupted run
    return done


def build_dataset(annotations: Sequence[TrackAnnotation], output_path: str | Path,
                  backend: LLMBackend, resume: bool = False, parallelism: int = 1,
                  manifest_path: str | Path | None = None, retries: int = 3,
                  templates: dict[str, InstructionTemplate] | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> GenerationManifest:
    """Generate the dataset JSONL plus a manifest; returns the manifest.

    Completed tracks stream into an append-only parts file next to the
    output. With resume=True, tracks already in the parts file are not sent
    to the backend again; without it, the parts file is discarded first.
    The final output is sorted by track id (pair order within a track is
    generation order), so any two complete runs over the same annotations
    and backend produce identical bytes.
    """
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    ids = [a.track_id for a in annotations]
    if len(set(ids)) != len(ids):
        raise InputError("annotations contain duplicate track ids")

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    parts_path = _parts_path(output_path)
    if not resume and parts_path.exists():
        parts_path.unlink()
    done = _load_parts(parts_path) if resume else {}
    done = {tid: pairs for tid, pairs in done.items() if tid in set(ids)}

    templates = templates or load_templates()
    todo = [a for a in annotations if a.track_id not in done]
    failures: list[dict] = []
    write_lock = threading.Lock()

    def produce(annotation: TrackAnnotation) -> list[QAPair]:
        return generate_for_track(annotation, backend, templates=templates,
                                  retries=retries, sleep=sleep)

    with open(parts_path, "a", encoding="utf-8") as parts_fh:
        def record(track_id: str, pairs: list[QAPair]) -> None:
            with write_lock:
                parts_fh.write(json.dumps(
                    {"track_id": track_id,
                     "pairs": [p.to_dict() for p in pairs]},
                    sort_keys=True) + "\n")
                parts_fh.flush()
                done[track_id] = pairs

        if parallelism == 1:
            for annotation in todo:
                try:
                    record(annotation.track_id, produce(annotation))
                except GenerationError as err:
                    failures.append({"track_id": err.track_id,
                                     "error": str(err)})
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = {pool.submit(produce, a): a for a in todo}
                for future in as_completed(futures):
                    annotation = futures[future]
                    try:
                        record(annotation.track_id, future.result())
                    except GenerationError as err:
                        failures.append({"track_id": err.track_id,
                                         "error": str(err)})

    ordered: list[QAPair] = []
    for tid in sorted(done):
        ordered.extend(done[tid])
    write_dataset(output_path, ordered)

    per_origin = {k: 0 for k in ORIGINS}
    per_source = {k: 0 for k in SOURCES}
    for pair in ordered:
        per_origin[pair.origin] += 1
        per_source[pair.source] += 1
    manifest = GenerationManifest(
        backend=backend.name,
        num_tracks_requested=len(annotations),
        num_tracks_completed=len(done),
        num_pairs=len(ordered),
        per_origin=per_origin,
        per_source=per_source,
        failures=sorted(failures, key=lambda f: f["track_id"]))
    manifest_path = Path(manifest_path) if manifest_path is not None else \
        output_path.with_name(output_path.name + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
