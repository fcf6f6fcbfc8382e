"""Prompt construction and per-vertex selection backends (LLM endpoint, oracle, heuristic)."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .choices import ChoiceSet

log = logging.getLogger(__name__)

DATASET_BLURB = (
    "The numbers are traffic flows: the count of vehicles passing a road sensor in each "
    "five-minute interval. Sensors are fixed loop detectors on highways, and the readings "
    "are aggregated into five-minute bins. Each forecast covers the next hour (12 intervals)."
)

SYSTEM_PERSONA = (
    "You are a traffic analyst. You study recent traffic counts at a road sensor and pick "
    "the most plausible forecast from a list of candidates."
)

CLARIFICATION = "Your answer could not be read. Reply with only the option number, an integer from 1 to {k}."


class ParseFailure(ValueError):
    """The response named no option in range."""


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _fmt_time(t) -> str:
    return str(np.datetime64(t, "m")).replace("T", " ")


def _clock(t) -> str:
    return _fmt_time(t)[-5:]


def _weekday(t) -> str:
    days = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
    # 1970-01-01 was a Thursday
    return days[(int(np.datetime64(t, "D").astype(np.int64)) + 3) % 7]


@dataclass(frozen=True, eq=False)
class PromptContext:
    sensor_id: str
    history: np.ndarray  # (T,) flow units
    history_times: np.ndarray  # (T,) datetime64
    forecast_start: np.datetime64
    forecast_end: np.datetime64
    location_text: str | None = None
    lat_lon: tuple[float, float] | None = None
    events_text: str | None = None
    dataset_blurb: str = DATASET_BLURB

    def __post_init__(self):
        if len(self.history) != len(self.history_times):
            raise ValueError("history and history_times must have the same length")


def build_prompt(ctx: PromptContext, cs: ChoiceSet) -> str:
    lines = ["## General information", ctx.dataset_blurb, ""]

    lines.append("## Spatial information")
    lines.append(f"Sensor ID: {ctx.sensor_id}.")
    if ctx.location_text:
        lines.append(f"Location: {ctx.location_text}.")
    if ctx.lat_lon is not None:
        lines.append(f"Coordinates: latitude {ctx.lat_lon[0]:.5f}, longitude {ctx.lat_lon[1]:.5f}.")
    lines.append("")

    first, last = ctx.history_times[0], ctx.history_times[-1]
    lines.append("## Temporal information")
    lines.append(f"Historical data were collected from {_fmt_time(first)} to {_fmt_time(last)} ({_weekday(first)}).")
    lines.append(
        f"The forecast covers {_fmt_time(ctx.forecast_start)} to {_fmt_time(ctx.forecast_end)} "
        f"({_weekday(ctx.forecast_start)})."
    )
    events = (ctx.events_text or "").strip()
    lines.append(f"Special events: {events}" if events else "Special events: no special events reported.")
    lines.append("")

    lines.append("## Historical data")
    lines.append("Timesteps: " + ", ".join(_clock(t) for t in ctx.history_times))
    lines.append("Flows: " + ", ".join(str(_round_half_up(v)) for v in ctx.history))
    lines.append("")

    lines.append("## Task")
    lines.append(
        f"Below are {len(cs)} candidate forecasts of the traffic flow at this sensor for the next "
        f"{len(cs.choices[0].values)} five-minute intervals. They come from a graph-based predictor and "
        "a hypergraph-based predictor, some with an adjustment applied. Considering the time of day, "
        "the recent history and any events, choose the candidate most likely to match the actual flows."
    )
    lines.append("")
    lines.append("## Options")
    for c in cs.choices:
        vals = ", ".join(str(_round_half_up(v)) for v in c.values)
        lines.append(f"Option {c.label}: [{vals}] ({c.describe()})")
    lines.append("")
    lines.append("Respond with the single option number.")
    return "\n".join(lines)


_OPTION = re.compile(r"option\s*#?\s*(\d+)", re.IGNORECASE)
_INT = re.compile(r"(?<![\d.])(\d+)(?![\d])")


def parse_selection(response: str, k: int) -> int:
    """First option number in ``1..k``; explicit ``Option N`` wins over bare integers."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for pattern in (_OPTION, _INT):
        for match in pattern.finditer(response or ""):
            n = int(match.group(1))
            if 1 <= n <= k:
                return n
    raise ParseFailure(f"no option number in 1..{k} found in {response[:80]!r}")


@dataclass(frozen=True, eq=False)
class SelectionResult:
    vertex: int
    chosen_label: int | None
    values: np.ndarray
    raw_response: str
    selector_kind: str
    fallback_used: bool = False
    attempts: int = 1


def huber_distance(a, b, delta: float = 1.0) -> np.ndarray:
    """Mean Huber penalty over the last axis."""
    r = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta)).mean(axis=-1)


def oracle_select(cs: ChoiceSet, truth, delta: float = 1.0) -> SelectionResult:
    dist = huber_distance(cs.values(), np.asarray(truth)[None, :], delta)
    label = int(np.argmin(dist)) + 1
    return SelectionResult(cs.vertex, label, cs[label].values, "", "oracle")


def heuristic_select(cs: ChoiceSet, history) -> SelectionResult:
    """Continuity rule: the candidate whose first step is closest to the last observation."""
    last = float(np.asarray(history)[-1])
    gaps = np.abs(cs.values()[:, 0] - last)
    label = int(np.argmin(gaps)) + 1
    return SelectionResult(cs.vertex, label, cs[label].values, "", "heuristic")


def fallback_values(cs: ChoiceSet) -> np.ndarray:
    return cs.base_values().mean(axis=0)


class OracleSelector:
    kind = "oracle"

    def __init__(self, delta: float = 1.0):
        self.delta = delta

    def select(self, choice_sets: Sequence[ChoiceSet], contexts=None, truth=None) -> list[SelectionResult]:
        """``truth`` is ``(N, T_out)`` in flow units."""
        if truth is None:
            raise ValueError("the oracle selector needs ground truth")
        return [oracle_select(cs, truth[cs.vertex], self.delta) for cs in choice_sets]


class HeuristicSelector:
    kind = "heuristic"

    def select(self, choice_sets, contexts, truth=None) -> list[SelectionResult]:
        return [heuristic_select(cs, contexts[cs.vertex].history) for cs in choice_sets]


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "meta-llama/Meta-Llama-3-70B-Instruct"
    api_key_env_var_name: str = "LEAF_LLM_API_KEY"
    temperature: float = 0.0
    max_concurrent_requests: int = 8
    request_timeout: float = 60.0
    retry_limit: int = 2
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")


class LlmSelector:
    """Chat-completions client issuing one request per vertex.

    Unparseable answers are re-asked up to ``retry_limit`` times; transport
    errors are retried with exponential backoff.  When a vertex still has no
    usable answer its selection falls back to the mean of the base forecasts.
    """

    kind = "llm"

    def __init__(self, cfg: LlmEndpointConfig, client: httpx.Client | None = None,
                 log_path: str | Path | None = None, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.client = client or httpx.Client(timeout=cfg.request_timeout)
        self.log_path = Path(log_path) if log_path else None
        self.sleep = sleep
        self._log_lock = threading.Lock()

    def _audit(self, record: dict) -> None:
        if self.log_path is None:
            return
        with self._log_lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env_var_name)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, messages: list[dict], vertex: int) -> str:
        """One completion, retrying transport failures; raises the last error when exhausted."""
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        body = {"model": self.cfg.model_name, "messages": messages, "temperature": self.cfg.temperature}
        for attempt in range(self.cfg.retry_limit + 1):
            try:
                resp = self.client.post(url, json=body, headers=self._headers(), timeout=self.cfg.request_timeout)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                self._audit({"vertex": vertex, "request": body, "response": content})
                return content or ""
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                self._audit({"vertex": vertex, "request": body, "error": repr(exc)})
                if attempt == self.cfg.retry_limit:
                    raise
                self.sleep(self.cfg.backoff_base * self.cfg.backoff_factor**attempt)
        raise AssertionError("unreachable")

    def select_one(self, cs: ChoiceSet, prompt: str) -> SelectionResult:
        messages = [{"role": "system", "content": SYSTEM_PERSONA}, {"role": "user", "content": prompt}]
        attempts, raw = 0, ""
        for _ in range(self.cfg.retry_limit + 1):
            attempts += 1
            try:
                raw = self._post(messages, cs.vertex)
            except Exception as exc:  # transport exhausted: never abort the run
                log.warning("vertex %d: endpoint failed: %r", cs.vertex, exc)
                raw = f"<error: {exc!r}>"
                break
            try:
                label = parse_selection(raw, len(cs))
            except ParseFailure:
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": CLARIFICATION.format(k=len(cs))},
                ]
                continue
            return SelectionResult(cs.vertex, label, cs[label].values, raw, self.kind, False, attempts)
        return SelectionResult(cs.vertex, None, fallback_values(cs), raw, self.kind, True, attempts)

    def select_prompts(self, choice_sets: Sequence[ChoiceSet], prompts: Sequence[str]) -> list[SelectionResult]:
        by_vertex = {}
        with ThreadPoolExecutor(max_workers=self.cfg.max_concurrent_requests) as pool:
            futures = {pool.submit(self.select_one, cs, p): cs.vertex for cs, p in zip(choice_sets, prompts)}
            for fut, vertex in futures.items():
                by_vertex[vertex] = fut.result()
        return [by_vertex[cs.vertex] for cs in choice_sets]

    def select(self, choice_sets, contexts, truth=None) -> list[SelectionResult]:
        prompts = [build_prompt(contexts[cs.vertex], cs) for cs in choice_sets]
        return self.select_prompts(choice_sets, prompts)

    def close(self) -> None:
        self.client.close()


def llm_select(prompts: Sequence[str], choice_sets: Sequence[ChoiceSet], cfg: LlmEndpointConfig,
               client: httpx.Client | None = None, **kwargs) -> list[SelectionResult]:
    return LlmSelector(cfg, client=client, **kwargs).select_prompts(choice_sets, prompts)


def make_selector(kind: str, endpoint: LlmEndpointConfig | None = None, delta: float = 1.0, **kwargs):
    """``kind`` in {"llm", "oracle", "heuristic", "none"}; "none" returns None."""
    if kind == "none":
        return None
    if kind == "oracle":
        return OracleSelector(delta)
    if kind == "heuristic":
        return HeuristicSelector()
    if kind == "llm":
        return LlmSelector(endpoint or LlmEndpointConfig(), **kwargs)
    raise ValueError(f"unknown selector kind {kind!r}")
