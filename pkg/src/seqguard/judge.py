"""Zero-shot comparison harness against a chat-completion endpoint.

Each test window is rendered as a deterministic prompt; responses come
from (in priority order) a fixture directory, the on-disk cache, or the
live endpoint. Raw responses are always persisted before parsing so a
bad parse never loses data. Scoring reuses the metrics module so local
and remote rows share one code path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .metrics import confusion, scalar_metrics
from .sessions import NUM_SPECIALS, PAD_ID, UNK_ID, LabeledWindow

API_KEY_ENV_VAR = "SEQGUARD_API_KEY"
UNKNOWN_EVENT_TEXT = "<unknown event>"
ANSWER_DIRECTIVE = "Answer with exactly one word: NORMAL or ANOMALY."

DEFAULT_PROMPT_TEMPLATE = (
    "You are reviewing a sequence of system log events recorded for one "
    "storage block.\n"
    "Each numbered line is the parsed template of one log event, in order "
    "of occurrence.\n"
    "\n"
    "{events}\n"
    "\n"
    "Decide whether this sequence of events indicates anomalous behaviour.\n"
    + ANSWER_DIRECTIVE
    + "\n"
)

_VERDICT_WORD = re.compile(r"\b(anomaly|normal)\b", re.IGNORECASE)


class UnknownEventId(KeyError):
    pass


class Unparseable(ValueError):
    """Response text contains neither verdict word."""


class AuthMissing(RuntimeError):
    """No API key in the environment and the prompt is not cached."""


class EndpointUnavailable(RuntimeError):
    """Transport kept failing after the configured retries."""


class CoverageGap(ValueError):
    """A model is missing a verdict or score for some test window."""


@dataclass
class JudgeConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 2.0
    cache_dir: str = "judge_cache"
    fixtures_dir: Optional[str] = None
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive requests/sec")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if "{events}" not in self.prompt_template:
            raise ValueError("prompt_template must contain an {events} slot")


@dataclass
class Verdict:
    window_id: str
    label: Optional[int]
    raw_response: str
    source: str
    ambiguous: bool = False


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def cache_key(model: str, prompt: str) -> str:
    digest = hashlib.sha256()
    digest.update(model.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(prompt.encode("utf-8"))
    return digest.hexdigest()


def build_prompt(
    window: LabeledWindow,
    template_table: dict[int, str],
    template: str = DEFAULT_PROMPT_TEMPLATE,
) -> str:
    """Render a window as numbered template lines inside the instruction text.

    Trailing padding is dropped; unknown-event slots render as a fixed
    marker so the judge sees that something unrecognized happened.
    """
    lines = []
    for event_id in window.event_ids:
        if event_id == PAD_ID:
            continue
        if event_id == UNK_ID:
            text = UNKNOWN_EVENT_TEXT
        elif event_id in template_table:
            text = template_table[event_id]
        else:
            raise UnknownEventId(f"no template for event id {event_id}")
        lines.append(f"{len(lines) + 1}. {text}")
    return template.format(events="\n".join(lines))


def vocab_template_table(templates) -> dict[int, str]:
    """Map model-vocabulary ids (mined id + specials offset) to template text."""
    return {t.event_id + NUM_SPECIALS: t.text for t in templates}


def parse_verdict(response_text: str) -> tuple[int, bool]:
    """Scan for verdict words; returns (label, ambiguous).

    A single verdict word decides directly. When both words occur the
    first occurrence wins and the verdict is flagged ambiguous.
    """
    if not response_text:
        raise Unparseable("empty response")
    matches = [m.group(1).lower() for m in _VERDICT_WORD.finditer(response_text)]
    if not matches:
        raise Unparseable(f"no verdict word in {response_text!r}")
    kinds = set(matches)
    label = 1 if matches[0] == "anomaly" else 0
    return label, len(kinds) > 1


def _extract_content(body: dict) -> str:
    try:
        return body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"response body missing choices[0].message.content: {exc}")


def _atomic_write_json(path: str, payload: dict) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, sort_keys=True, indent=2)
            handle.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _default_transport(config: JudgeConfig, payload: dict, api_key: str) -> dict:
    import requests

    response = requests.post(
        config.endpoint,
        json=payload,
        headers={"Authorization": f"Bearer {api_key}"},
        timeout=config.timeout,
    )
    if response.status_code in (429,) or response.status_code >= 500:
        raise _RetryableHTTP(f"HTTP {response.status_code}")
    if response.status_code != 200:
        raise EndpointUnavailable(f"HTTP {response.status_code}: {response.text[:200]}")
    return response.json()


class _RetryableHTTP(RuntimeError):
    pass


@dataclass
class _Pacer:
    """Spaces request starts at least 1/rate_limit apart."""

    min_interval: float
    sleep: Callable[[float], None] = time.sleep
    now: Callable[[], float] = time.monotonic
    _last: Optional[float] = field(default=None, repr=False)

    def wait(self) -> None:
        t = self.now()
        if self._last is not None:
            remaining = self.min_interval - (t - self._last)
            if remaining > 0:
                self.sleep(remaining)
                t = self.now()
        self._last = t


def classify_remote(
    config: JudgeConfig,
    prompts: Sequence[tuple[str, str]],
    transport: Optional[Callable[[dict], dict]] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[Verdict]:
    """Resolve (window_id, prompt) pairs to verdicts, cache-first.

    Resolution order per prompt: fixture file, cache file, live call.
    Live responses are written to the cache atomically before parsing.
    An injected transport takes the request payload and returns the
    response body, replacing the HTTP layer in tests.
    """
    os.makedirs(config.cache_dir, exist_ok=True)
    pacer = _Pacer(min_interval=1.0 / config.rate_limit, sleep=sleep)
    api_key = os.environ.get(API_KEY_ENV_VAR)
    verdicts = []
    for window_id, prompt in prompts:
        body = None
        source = None

        if config.fixtures_dir is not None:
            fixture_path = os.path.join(
                config.fixtures_dir, f"{prompt_hash(prompt)}.json"
            )
            if not os.path.exists(fixture_path):
                raise EndpointUnavailable(
                    f"fixture mode: no fixture {os.path.basename(fixture_path)} "
                    f"for window {window_id}"
                )
            with open(fixture_path, "r", encoding="utf-8") as handle:
                body = json.load(handle)
            source = "fixture"

        cache_path = os.path.join(
            config.cache_dir, f"{cache_key(config.model, prompt)}.json"
        )
        if body is None and os.path.exists(cache_path):
            with open(cache_path, "r", encoding="utf-8") as handle:
                body = json.load(handle)["response"]
            source = "cache"

        if body is None:
            if transport is None and api_key is None:
                raise AuthMissing(
                    f"set {API_KEY_ENV_VAR} to query the endpoint "
                    f"(window {window_id} not cached)"
                )
            payload = {
                "model": config.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0,
            }
            body = _call_with_retries(config, payload, transport, api_key, pacer, sleep)
            _atomic_write_json(
                cache_path,
                {
                    "model": config.model,
                    "prompt_sha256": prompt_hash(prompt),
                    "response": body,
                },
            )
            source = "live"

        content = _extract_content(body)
        try:
            label, ambiguous = parse_verdict(content)
        except Unparseable:
            verdicts.append(
                Verdict(window_id=window_id, label=None, raw_response=content, source=source)
            )
            continue
        verdicts.append(
            Verdict(
                window_id=window_id,
                label=label,
                raw_response=content,
                source=source,
                ambiguous=ambiguous,
            )
        )
    return verdicts


def _call_with_retries(
    config: JudgeConfig,
    payload: dict,
    transport: Optional[Callable[[dict], dict]],
    api_key: Optional[str],
    pacer: _Pacer,
    sleep: Callable[[float], None],
) -> dict:
    last_error: Optional[Exception] = None
    for attempt in range(config.max_retries + 1):
        if attempt > 0:
            sleep(0.5 * 2 ** (attempt - 1))
        pacer.wait()
        try:
            if transport is not None:
                return transport(payload)
            return _default_transport(config, payload, api_key or "")
        except EndpointUnavailable:
            raise
        except (_RetryableHTTP, OSError, ValueError) as exc:
            last_error = exc
        except Exception as exc:
            # requests exceptions do not share a stdlib base; retry them too.
            if type(exc).__module__.startswith("requests"):
                last_error = exc
            else:
                raise
    raise EndpointUnavailable(
        f"endpoint failed after {config.max_retries + 1} attempts: {last_error}"
    )


@dataclass
class ComparisonRow:
    model: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    unparseable: int


def verdict_scores(
    verdicts: Sequence[Verdict], windows: Sequence[LabeledWindow]
) -> tuple[list[float], int]:
    """Verdicts in window order as {0,1} scores; unparseable counts as 0."""
    by_id = {v.window_id: v for v in verdicts}
    if len(by_id) != len(verdicts):
        raise CoverageGap("duplicate window_id in verdict set")
    scores = []
    unparseable = 0
    for w in windows:
        v = by_id.get(w.window_id)
        if v is None:
            raise CoverageGap(f"no verdict for window {w.window_id}")
        if v.label is None:
            unparseable += 1
            scores.append(0.0)
        else:
            scores.append(float(v.label))
    return scores, unparseable


def compare(
    local_scores: dict[str, Sequence[float]],
    judge_verdicts: dict[str, Sequence[Verdict]],
    windows: Sequence[LabeledWindow],
    threshold: float = 0.5,
) -> list[ComparisonRow]:
    """One metrics row per model over the identical test windows."""
    labels = [w.label for w in windows]
    rows = []
    for name, scores in local_scores.items():
        if len(scores) != len(windows):
            raise CoverageGap(
                f"model {name}: {len(scores)} scores for {len(windows)} windows"
            )
        m = scalar_metrics(confusion(list(scores), labels, threshold))
        rows.append(ComparisonRow(model=name, unparseable=0, **m))
    for name, verdicts in judge_verdicts.items():
        scores, unparseable = verdict_scores(verdicts, windows)
        m = scalar_metrics(confusion(scores, labels, threshold))
        rows.append(ComparisonRow(model=name, unparseable=unparseable, **m))
    return rows


def write_comparison_csv(path: str, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["model", "accuracy", "precision", "recall", "f1", "unparseable"])
        for r in rows:
            writer.writerow(
                [r.model, str(r.accuracy), str(r.precision), str(r.recall), str(r.f1), r.unparseable]
            )


def write_verdicts_jsonl(path: str, verdicts: Sequence[Verdict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for v in verdicts:
            handle.write(
                json.dumps(
                    {
                        "ambiguous": v.ambiguous,
                        "label": v.label,
                        "raw_response": v.raw_response,
                        "source": v.source,
                        "window_id": v.window_id,
                    },
                    sort_keys=True,
                )
            )
            handle.write("\n")


def read_verdicts_jsonl(path: str) -> list[Verdict]:
    verdicts = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            obj = json.loads(line)
            verdicts.append(
                Verdict(
                    window_id=obj["window_id"],
                    label=obj["label"],
                    raw_response=obj["raw_response"],
                    source=obj["source"],
                    ambiguous=obj.get("ambiguous", False),
                )
            )
    return verdicts
