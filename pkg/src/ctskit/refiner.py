"""Layout refiner protocol: request/response shapes, the deterministic local
refiner, and an HTTP client for an external refinement service."""
from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .errors import ParameterError, ParseError, RefinerBadOutput, RefinerUnavailable
from .layout import EPS_OVERLAP, ViolationReport, parse_layout, separate_worst, serialize_layout

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
INSTRUCTIONS = (
    "You are given a room layout program and the list of conflicts found when executing it. "
    "Return the full program with box positions adjusted so that no boxes overlap and every "
    "box lies inside its room. Keep names, classes and sizes unchanged."
)


@dataclass
class RefinerRequest:
    program: str
    violations: list
    round: int
    instructions: str = INSTRUCTIONS

    def __post_init__(self):
        if self.round < 1:
            raise ParameterError("round must be >= 1")

    def to_json(self):
        return json.dumps({"v": WIRE_VERSION, "program": self.program, "violations": self.violations,
                           "round": self.round, "instructions": self.instructions}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("v") != WIRE_VERSION:
            raise ParseError(f"unsupported request version {d.get('v')!r}", "v")
        return cls(d["program"], d["violations"], int(d["round"]), d.get("instructions", INSTRUCTIONS))


@dataclass
class RefinerResponse:
    program: str
    rationale: str = ""

    def to_json(self):
        return json.dumps({"v": WIRE_VERSION, "program": self.program, "rationale": self.rationale}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RefinerBadOutput(f"response is not JSON: {exc}") from exc
        if not isinstance(d, dict) or d.get("v") != WIRE_VERSION or not isinstance(d.get("program"), str):
            raise RefinerBadOutput("response lacks a v=1 program field")
        return cls(d["program"], str(d.get("rationale", "")))


def refine_local(req, eps_overlap=EPS_OVERLAP):
    """Deterministic repair of the worst violation in the request's program."""
    h = parse_layout(req.program)
    if not req.violations:
        return RefinerResponse(req.program, "no violations")
    report = ViolationReport.from_list(req.violations)
    fixed = separate_worst(h, report, eps_overlap)
    return RefinerResponse(serialize_layout(fixed), "minimal-translation separation of the worst violation")


class LocalRefiner:
    def __init__(self, eps_overlap=EPS_OVERLAP):
        self.eps_overlap = eps_overlap

    def refine(self, req):
        return refine_local(req, self.eps_overlap)


@dataclass
class RemoteRefiner:
    """POSTs the request JSON to ``url``; the bearer token comes from ``token_env``."""

    url: str
    token_env: str | None = "CTSKIT_REFINER_TOKEN"
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    sleep: object = field(default=time.sleep, repr=False)

    def __post_init__(self):
        if not self.url:
            raise ParameterError("refiner url is empty")
        if self.timeout <= 0:
            raise ParameterError("timeout must be positive")

    def _headers(self):
        h = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            h["Authorization"] = f"Bearer {token}"
        return h

    def refine(self, req):
        body = req.to_json().encode()
        last = None
        for attempt in range(self.retries):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                r = urllib.request.Request(self.url, data=body, headers=self._headers(), method="POST")
                with urllib.request.urlopen(r, timeout=self.timeout) as resp:
                    text = resp.read().decode("utf-8")
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
                logger.warning("refiner attempt %d/%d failed: %s", attempt + 1, self.retries, exc)
        else:
            raise RefinerUnavailable(f"{self.url} unreachable after {self.retries} attempts: {last}")
        out = RefinerResponse.from_json(text)
        try:
            parse_layout(out.program)
        except ParseError as exc:
            raise RefinerBadOutput(f"returned program does not parse: {exc}") from exc
        return out


def refine_remote(req, url, token_env="CTSKIT_REFINER_TOKEN", timeout=30.0, retries=3, sleep=time.sleep):
    return RemoteRefiner(url, token_env, timeout, retries, sleep=sleep).refine(req)
