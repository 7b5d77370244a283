"""Vision-language judge client: scores original/counterfactual pairs over HTTP JSON.

The endpoint speaks the common chat-completions shape: a user message with a
text part and two base64 PNG image parts, answered by
``{"choices": [{"message": {"content": "..."}}]}``. Scores are additive
metadata; a failed sample is recorded and never filled in.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import httpx
import numpy as np
from PIL import Image

from ..errors import CfsteerError, ConfigError
from ..synthspur import SHAPES

log = logging.getLogger(__name__)

CRITERIA = ("validity", "sparsity", "proximity", "realism")

_HEADER = (
    "You will see two images. The first is an original image and the second is a "
    "counterfactual version of it, edited so that a classifier changes its decision.\n"
    "Attribute that should change: {attribute}. {transition}\n"
    "Give each criterion an integer score from 1 (worst) to 10 (best):\n"
    "Validity: has the counterfactual convincingly taken on the target value of the attribute?\n"
    "Sparsity: were only the parts needed for that change edited, with unrelated content "
    "(including {nuisance}) left as it was?\n"
    "Proximity: how close does the counterfactual look to the original to a human observer?\n"
    "Realism: could the counterfactual plausibly be a sample of the same image collection?\n"
    "Reply with four lines of the form `Criterion: score` and nothing else."
)

TEMPLATES = {
    "synthspur": {
        "attribute": "the shape drawn in the centre",
        "transition": "The shape is a {source}; the target is a {target}.",
        "nuisance": "the background colour",
    },
    "generic": {
        "attribute": "{attribute}",
        "transition": "The original shows {source}; the target is {target}.",
        "nuisance": "any other attribute",
    },
}


def build_prompt(kind, source, target, attribute=None):
    """Prompt text for one pair. ``kind`` selects a template from TEMPLATES."""
    if kind not in TEMPLATES:
        raise ConfigError(f"unknown dataset kind {kind!r}; choose from {sorted(TEMPLATES)}", "kind")
    t = TEMPLATES[kind]
    return _HEADER.format(
        attribute=t["attribute"].format(attribute=attribute or "the class"),
        transition=t["transition"].format(source=source, target=target),
        nuisance=t["nuisance"],
    )


def prompt_checksum(text):
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class JudgeConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "judge"
    api_key_env: str = "CFSTEER_JUDGE_API_KEY"
    timeout: float = 60.0
    max_retries: int = 4
    backoff: float = 1.0
    backoff_cap: float = 30.0
    concurrency: int = 2

    def api_key(self):
        key = os.environ.get(self.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set", "api_key_env")
        return key


@dataclass
class JudgeVerdict:
    sample_id: int
    validity: int
    sparsity: int
    proximity: int
    realism: int
    raw: str
    prompt_checksum: str
    retries: int = 0

    @property
    def scores(self):
        return tuple(getattr(self, c) for c in CRITERIA)

    @property
    def mean(self):
        return sum(self.scores) / 4.0

    def to_dict(self):
        return {**asdict(self), "mean": self.mean}


@dataclass
class JudgeFailure:
    sample_id: int
    reason: str
    raw: str | None = None
    retries: int = 0


@dataclass
class JudgeReport:
    verdicts: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def summary(self):
        out = {"n_scored": len(self.verdicts), "n_failed": len(self.failures)}
        for c in CRITERIA + ("mean",):
            vals = [getattr(v, c) for v in self.verdicts]
            out[c] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self):
        return {
            "summary": self.summary(),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "failures": [asdict(f) for f in self.failures],
        }


class JudgeParseError(CfsteerError):
    pass


class JudgeRequestError(CfsteerError):
    def __init__(self, message, retries=0):
        super().__init__(message)
        self.retries = retries


_LABELLED = re.compile(r"(validity|sparsity|proximity|realism)\W{0,6}?(\d+(?:\.\d+)?)", re.I)
_NUMBER = re.compile(r"(?<![\d.])(\d+(?:\.\d+)?)(?:\s*/\s*10)?(?![\d.])")


def parse_scores(text):
    """Four integer scores in [1, 10] from a reply.

    Labelled lines (``Validity: 8``) are preferred; otherwise a reply made of
    exactly four numbers (``8 7 9 8``) is read in criterion order.
    """
    if not isinstance(text, str) or not text.strip():
        raise JudgeParseError("empty reply")
    found = {}
    for name, value in _LABELLED.findall(text):
        found.setdefault(name.lower(), value)
    if set(found) == set(CRITERIA):
        values = [found[c] for c in CRITERIA]
    else:
        values = _NUMBER.findall(text)
        if len(values) != 4:
            raise JudgeParseError(f"expected four scores, found {len(values)}")
    scores = []
    for v in values:
        x = float(v)
        if x != int(x) or not 1 <= x <= 10:
            raise JudgeParseError(f"score {v} is not an integer in [1, 10]")
        scores.append(int(x))
    return tuple(scores)


def png_base64(image):
    """(C, H, W) float image in [0, 1] -> base64 PNG."""
    arr = np.asarray(image, dtype=np.float64)
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_request(config, prompt, x, x_cf):
    def part(img):
        return {"type": "image_url", "image_url": {"url": "data:image/png;base64," + png_base64(img)}}

    return {
        "model": config.model,
        "temperature": 0,
        "messages": [{"role": "user", "content": [{"type": "text", "text": prompt}, part(x), part(x_cf)]}],
    }


def _content(response):
    try:
        return response.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise JudgeParseError(f"malformed response body: {e}") from None


class JudgeClient:
    """Synchronous client with exponential-backoff retries on transient failures."""

    RETRY_STATUS = {408, 429, 500, 502, 503, 504}

    def __init__(self, config=None, transport=None, sleep=time.sleep):
        self.config = config or JudgeConfig()
        key = self.config.api_key()
        self.sleep = sleep
        self.http = httpx.Client(
            transport=transport,
            timeout=self.config.timeout,
            headers={"Authorization": f"Bearer {key}"},
        )

    def close(self):
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, payload):
        """POST ``payload``; returns (response, retries used)."""
        cfg = self.config
        retries = 0
        while True:
            try:
                resp = self.http.post(cfg.endpoint, json=payload)
                if resp.status_code not in self.RETRY_STATUS:
                    if resp.status_code >= 400:
                        raise JudgeRequestError(f"HTTP {resp.status_code}", retries)
                    return resp, retries
                reason = f"HTTP {resp.status_code}"
            except httpx.TimeoutException:
                reason = "timeout"
            except httpx.TransportError as e:
                reason = f"transport error: {e}"
            if retries >= cfg.max_retries:
                raise JudgeRequestError(f"giving up after {retries} retries ({reason})", retries)
            delay = min(cfg.backoff * 2**retries, cfg.backoff_cap)
            retries += 1
            log.warning("judge retry %d after %s; sleeping %.2fs", retries, reason, delay)
            self.sleep(delay)

    def judge(self, sample_id, prompt, x, x_cf):
        """JudgeVerdict for one pair, or JudgeFailure."""
        checksum = prompt_checksum(prompt)
        retries = 0
        raw = None
        try:
            resp, retries = self.post(build_request(self.config, prompt, x, x_cf))
            raw = _content(resp)
            scores = parse_scores(raw)
        except JudgeRequestError as e:
            return JudgeFailure(int(sample_id), str(e), raw, e.retries)
        except JudgeParseError as e:
            return JudgeFailure(int(sample_id), f"unparseable: {e}", raw if raw is not None else resp.text, retries)
        return JudgeVerdict(int(sample_id), *scores, raw=raw, prompt_checksum=checksum, retries=retries)


def shape_prompt(y, y_target, kind="synthspur"):
    return build_prompt(kind, SHAPES[int(y)], SHAPES[int(y_target)])


def vlm_judge(results, kind="synthspur", config=None, client=None, transport=None):
    """Judge every CEResult's (x, x' final) pair with bounded concurrency."""
    config = config or JudgeConfig()
    own = client is None
    client = client or JudgeClient(config, transport=transport)
    report = JudgeReport()

    def work(r):
        if kind == "synthspur":
            prompt = shape_prompt(r.y, r.y_target, kind)
        else:
            prompt = build_prompt(kind, f"class {r.y}", f"class {r.y_target}")
        return client.judge(r.sample_id, prompt, r.x, r.x_final)

    try:
        with ThreadPoolExecutor(max(1, config.concurrency)) as pool:
            for out in pool.map(work, results):
                (report.verdicts if isinstance(out, JudgeVerdict) else report.failures).append(out)
    finally:
        if own:
            client.close()
    return report


def save_judge_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    return path
