"""Run configuration: INI files layered over the packaged defaults, validated into plain dicts."""

from __future__ import annotations

import configparser
import hashlib
import json
from importlib import resources
from pathlib import Path

from .engine import DECODE_MODES
from .trigger import TRIGGER_MODES


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _list(cast):
    def parse(raw: str):
        return [cast(x.strip()) for x in raw.split(",") if x.strip()]

    return parse


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _pos_weight(raw: str):
    return "auto" if raw.strip() == "auto" else float(raw)


def _positive(x):
    return x > 0


def _unit_open(x):
    return 0 < x < 1


def _budget(x):
    return 0 < x <= 1


# section -> key -> (parser, check or None, description of the check)
SCHEMA = {
    "run": {"seed": (int, lambda x: x >= 0, "must be >= 0")},
    "corpus": {
        "path": (str, None, ""),
        "tokenization": (str, lambda x: x in ("char", "byte"), "must be char or byte"),
        "reserved": (int, lambda x: x >= 2, "must be >= 2"),
    },
    "student": {
        "kind": (str, lambda x: x == "tabular", "only tabular students are supported"),
        "order": (int, lambda x: x >= 1, "must be >= 1"),
        "k": (float, _positive, "must be > 0"),
    },
    "teacher": {
        "kind": (str, lambda x: x in ("tabular", "remote"), "must be tabular or remote"),
        "order": (int, lambda x: x >= 1, "must be >= 1"),
        "k": (float, _positive, "must be > 0"),
        "endpoint": (str, None, ""),
        "model": (str, None, ""),
        "api_key_env": (str, None, ""),
        "top_logprobs_n": (int, lambda x: x >= 1, "must be >= 1"),
        "timeout": (float, _positive, "must be > 0"),
        "retries": (int, lambda x: x >= 0, "must be >= 0"),
        "backoff_base": (float, lambda x: x >= 0, "must be >= 0"),
        "floor_logprob": (float, None, ""),
    },
    "trigger": {
        "mode": (str, lambda x: x in TRIGGER_MODES, f"must be one of {', '.join(TRIGGER_MODES)}"),
        "tau": (float, _budget, "must lie in (0, 1]"),
        "learned_threshold": (float, _unit_open, "must lie in (0, 1)"),
        "calibration_steps": (int, lambda x: x >= 10, "must be >= 10"),
        "horizon": (int, lambda x: x >= 1, "must be >= 1"),
        "prompt_len": (int, lambda x: x >= 1, "must be >= 1"),
    },
    "trigger_head": {
        "label_tau": (float, _unit_open, "must lie in (0, 1)"),
        "prompts": (int, lambda x: x >= 1, "must be >= 1"),
        "horizon": (int, lambda x: x >= 1, "must be >= 1"),
        "epochs": (int, lambda x: x >= 0, "must be >= 0"),
        "lr": (float, _positive, "must be > 0"),
        "batch_size": (int, lambda x: x >= 1, "must be >= 1"),
        "pos_weight": (_pos_weight, lambda x: x == "auto" or x > 0, "must be auto or > 0"),
        "hidden": (int, lambda x: x >= 1, "must be >= 1"),
        "dropout": (float, lambda x: 0 <= x < 1, "must lie in [0, 1)"),
        "split_seed": (int, lambda x: x >= 0, "must be >= 0"),
    },
    "distill": {
        "K": (int, lambda x: x >= 2, "must be >= 2"),
        "tau": (float, _budget, "must lie in (0, 1]"),
        "prompts": (int, lambda x: x >= 1, "must be >= 1"),
        "horizon": (int, lambda x: x >= 1, "must be >= 1"),
        "strategy": (str, lambda x: x in ("topk", "multinomial"), "must be topk or multinomial"),
        "margin_delta": (float, lambda x: x >= 0, "must be >= 0"),
        "temperature": (float, _positive, "must be > 0"),
        "beta": (float, lambda x: x >= 0, "must be >= 0"),
        "margin": (_bool, None, ""),
        "lr": (float, _positive, "must be > 0"),
        "epochs": (int, lambda x: x >= 0, "must be >= 0"),
        "batch_size": (int, lambda x: x >= 1, "must be >= 1"),
        "split_seed": (int, lambda x: x >= 0, "must be >= 0"),
    },
    "decode": {
        "mode": (str, lambda x: x in DECODE_MODES, f"must be one of {', '.join(DECODE_MODES)}"),
        "K": (int, lambda x: x >= 1, "must be >= 1"),
        "max_len": (int, lambda x: x >= 1, "must be >= 1"),
        "prompts": (int, lambda x: x >= 1, "must be >= 1"),
        "prompt_len": (int, lambda x: x >= 1, "must be >= 1"),
        "strategy": (str, lambda x: x in ("topk", "multinomial"), "must be topk or multinomial"),
        "temperature": (float, _positive, "must be > 0"),
    },
    "eval": {
        "modes": (_list(str), lambda xs: xs and all(x in DECODE_MODES for x in xs), "unknown decode mode"),
        "k_grid": (_list(int), lambda xs: xs and all(x >= 1 for x in xs), "entries must be >= 1"),
        "fire_rate_taus": (_list(float), lambda xs: all(0 < x < 1 for x in xs), "entries must lie in (0, 1)"),
        "stream_steps": (int, lambda x: x >= 10, "must be >= 10"),
        "agree_prompts": (int, lambda x: x >= 1, "must be >= 1"),
    },
}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    cp.optionxform = str  # keep "K" as written
    return cp


def default_text() -> str:
    return resources.files("seldecode").joinpath("defaults.ini").read_text()


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Parse and validate; ``overrides`` maps "section.key" to a raw string value."""
    cp = _parser()
    cp.read_string(default_text(), source="defaults.ini")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        user = _parser()
        try:
            user.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise ConfigError("config", str(exc)) from None
        for section in user.sections():
            if section not in SCHEMA:
                raise ConfigError(section, "unknown section")
            for key, value in user.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                cp.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(dotted, "unknown key")
        cp.set(section, key, str(value))
    return validate(cp)


def validate(cp: configparser.ConfigParser) -> dict:
    out: dict = {}
    for section, fields in SCHEMA.items():
        out[section] = {}
        for key, (parse, check, why) in fields.items():
            path = f"{section}.{key}"
            if not cp.has_option(section, key):
                raise ConfigError(path, "missing")
            raw = cp.get(section, key)
            try:
                value = parse(raw)
            except ValueError:
                raise ConfigError(path, f"cannot parse {raw!r}") from None
            if check is not None and not check(value):
                raise ConfigError(path, why)
            out[section][key] = value
    t = out["teacher"]
    if t["kind"] == "remote":
        for key in ("endpoint", "model"):
            if not t[key]:
                raise ConfigError(f"teacher.{key}", "required for a remote teacher")
        if out["trigger"]["mode"] == "oracle_kl":
            raise ConfigError("trigger.mode", "oracle_kl needs a tabular teacher")
        if out["decode"]["K"] > t["top_logprobs_n"]:
            raise ConfigError("decode.K", "exceeds teacher.top_logprobs_n")
    return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
