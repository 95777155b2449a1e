"""Classifier backends.

``RuleBackend`` matches the structural patterns defined next to each
pseudocode template; it is deterministic and hermetic, so it is the default
and the test oracle.  ``LlmBackend`` sends the minimal prompts to a
chat-completions endpoint; any transport failure falls back to the rule
backend with a warning, and every request/response pair is appended to a
JSONL audit file.

Both backends are stateless per call and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import warnings

from . import templates
from .errors import AttrExtractionError

ENV_ENDPOINT = "DNNLIFT_LLM_ENDPOINT"
ENV_API_KEY = "DNNLIFT_LLM_API_KEY"
ENV_MODEL = "DNNLIFT_LLM_MODEL"


class RuleBackend:
    """Deterministic template-pattern classifier."""

    name = "rule"

    def classify(self, pseudocode: str, candidates: list[str]) -> str | None:
        return templates.detect(pseudocode, candidates)

    def extract_attr(self, pseudocode: str, op: str, attribute: str):
        if op == "avgpool" and attribute == "kernel_size":
            c = templates.extract_reciprocal(pseudocode)
            if c is None:
                raise AttrExtractionError("no reciprocal window constant in pseudocode")
            return 1.0 / math.sqrt(c)
        if op == "clip" and attribute == "bounds":
            bounds = templates.extract_clip_bounds(pseudocode)
            if bounds is None:
                raise AttrExtractionError("no clamp constants in pseudocode")
            return bounds
        if op == "lrn" and attribute == "all":
            attrs = templates.extract_lrn_attrs(pseudocode)
            if attrs is None:
                raise AttrExtractionError("no normalization constants in pseudocode")
            return attrs
        if attribute == "kernel_size_loops":
            k = templates.extract_glow_kernel(pseudocode)
            if k is None:
                raise AttrExtractionError("no paired kernel loops in pseudocode")
            return k
        if attribute == "channel_loops":
            c = templates.extract_glow_channel(pseudocode)
            if c is None:
                raise AttrExtractionError("no channel loop after kernel loops")
            return c
        raise AttrExtractionError(f"unsupported extraction {op}/{attribute}")

    def check_activation(self, pseudocode: str):
        return templates.check_activation_tail(pseudocode)


_CLASSIFY_PROMPT = (
    "You are an AI assistant specialized in analyzing operators. "
    "Given the decompiled code of an operator: {pseudocode}, "
    "identify the operator as one of {candidates}."
)
_ATTR_PROMPT = (
    "You are an AI assistant specialized in analyzing operators. "
    "Given the decompiled code of a {type} operator: {pseudocode}, "
    "infer the {attribute}."
)
_ACTIVATION_PROMPT = (
    "You are an AI assistant specialized in analyzing operators. "
    "Given the tail of the decompiled code of a fused operator: {tail}, "
    "state which activation is applied: relu, clip or none."
)

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")


class LlmBackend:
    """Chat-completions classifier with rule-backend fallback."""

    name = "llm"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        audit_path=None,
        transport=None,
        fallback=None,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        self.api_key = api_key or os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "gpt-4o")
        self.timeout = timeout
        self.retries = retries
        self.audit_path = audit_path
        self.fallback = fallback if fallback is not None else RuleBackend()
        self._transport = transport
        self._audit_lock = threading.Lock()

    # transport is injectable so tests never need a live endpoint
    def _post(self, payload: dict) -> str:
        if self._transport is not None:
            return self._transport(payload)
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            self.endpoint, json=payload, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        body = resp.json()
        return body["choices"][0]["message"]["content"]

    def _audit(self, prompt: str, response: str | None, error: str | None = None):
        if not self.audit_path:
            return
        entry = {"endpoint": self.endpoint, "model": self.model, "prompt": prompt,
                 "response": response, "error": error}
        with self._audit_lock:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _ask(self, prompt: str) -> str | None:
        if not self.endpoint and self._transport is None:
            self._audit(prompt, None, error="no endpoint configured")
            return None
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        last_err = None
        for _ in range(self.retries + 1):
            try:
                text = self._post(payload)
                self._audit(prompt, text)
                return text
            except Exception as e:  # noqa: BLE001 - network layer is opaque
                last_err = e
        self._audit(prompt, None, error=str(last_err))
        return None

    @staticmethod
    def _first_mentioned(text: str, candidates: list[str]) -> str | None:
        """Tie-break rule: take the first candidate-list member mentioned."""
        best = None
        for cand in candidates:
            pos = text.find(cand)
            if pos < 0:
                continue
            key = (pos, -len(cand))
            if best is None or key < best[0]:
                best = (key, cand)
        return best[1] if best else None

    def classify(self, pseudocode: str, candidates: list[str]) -> str | None:
        prompt = _CLASSIFY_PROMPT.format(
            pseudocode=pseudocode, candidates=", ".join(candidates)
        )
        text = self._ask(prompt)
        if text is None:
            warnings.warn("LLM backend unavailable; falling back to rule backend")
            return self.fallback.classify(pseudocode, candidates)
        return self._first_mentioned(text, candidates)

    def extract_attr(self, pseudocode: str, op: str, attribute: str):
        prompt = _ATTR_PROMPT.format(type=op, pseudocode=pseudocode, attribute=attribute)
        text = self._ask(prompt)
        if text is None:
            warnings.warn("LLM backend unavailable; falling back to rule backend")
            return self.fallback.extract_attr(pseudocode, op, attribute)
        numbers = _NUMBER_RE.findall(text)
        if not numbers:
            raise AttrExtractionError(f"LLM reply carries no number: {text!r}")
        if attribute == "bounds":
            if len(numbers) < 2:
                raise AttrExtractionError(f"LLM reply carries no bounds: {text!r}")
            return float(numbers[0]), float(numbers[1])
        if op == "lrn" and attribute == "all":
            if len(numbers) < 4:
                raise AttrExtractionError(f"LLM reply carries too few constants: {text!r}")
            return {
                "size": int(float(numbers[0])),
                "alpha": float(numbers[1]),
                "beta": float(numbers[2]),
                "bias": float(numbers[3]),
            }
        return float(numbers[0])

    def check_activation(self, pseudocode: str):
        tail = "\n".join(pseudocode.splitlines()[-12:])
        text = self._ask(_ACTIVATION_PROMPT.format(tail=tail))
        if text is None:
            warnings.warn("LLM backend unavailable; falling back to rule backend")
            return self.fallback.check_activation(pseudocode)
        lowered = text.lower()
        if "clip" in lowered:
            bounds = templates.extract_clip_bounds(pseudocode) or (0.0, 6.0)
            return ("clip", bounds[0], bounds[1])
        if "relu" in lowered:
            return ("relu",)
        return None


def make_backend(name: str, audit_path=None):
    if name == "rule":
        return RuleBackend()
    if name == "llm":
        return LlmBackend(audit_path=audit_path)
    raise ValueError(f"unknown backend {name!r}")
