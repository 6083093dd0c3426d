"""Plain-text run configuration: [section] headers, key=value lines, and
# comments.  Overrides apply after file load, last wins; every run persists
its fully-resolved config next to its outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

from semlink import data as dt
from semlink import evalharness as ev
from semlink import losses as ls
from semlink import models as md
from semlink import pipeline as pl


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, object]] = {
    "data": {
        "vocab_src": 27,
        "vocab_tgt": 27,
        "frames_per_token": 4,
        "frame_dim": 16,
        "frame_noise": 0.3,
        "rule_seed": 7,
        "min_tokens": 4,
        "max_tokens": 12,
        "max_target_len": 16,
        "train_size": 2000,
        "test_size": 200,
    },
    "corruption": {
        "kind": "interference",
        "rho": 0.25,
        "spans": 2,
        "burst_scale": 3.0,
        "interference_gain": 3.0,
    },
    "model": {
        "preset": "desk",          # desk | paper
        "model_width": 64,
        "heads": 4,
        "ff_width": 128,
        "feature_width": 32,
        "kernel": 5,
        "extractor_depth": 2,
        "converter_depth": 2,
        "converter_conv_depth": 1,
        "decoder_depth": 2,
        "codec_hidden": 64,
        "symbol_width": 32,
        "disc_depth": 2,
        "disc_channels": 8,
        "comp_depth": 3,
        "comp_channels": 8,
        "probe_hidden": 32,
    },
    "train": {
        "stage1_steps": 2600,
        "stage2_steps": 1000,
        "stage3_steps": 600,
        "batch_size": 16,
        "lr": 1e-3,
        "lr_disc": 2e-4,
        "snr_lo": 0.0,
        "snr_hi": 12.0,
        "channel_kind": "awgn",
        "k_gen": 1,
        "eval_every": 100,
        "kappa": 0.95,
        "xi": 10.0,
        "smoothing_rule": "standard",   # the trainer's rule; losses keep paper-literal
    },
    "eval": {
        "snrs_db": (0.0, 3.0, 6.0, 9.0, 12.0),
        "channels": ("awgn", "rayleigh"),
        "systems": ("ross_full", "generator_only", "deepsc_s2t_clean_encoder",
                    "baseline_digital"),
        "input": "corrupted",           # clean | corrupted
        "n_utterances": 200,
        "embedding_seed": 0,
        "embedding_dim": 64,
        "eval_snr_db": 6.0,
        "eval_channel": "rayleigh",
    },
    "run": {
        "seed": 0,
    },
}


def _parse_value(raw: str, default) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return math.inf if raw in ("inf", "+inf") else float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = default[0] if default else ""
            return tuple(float(p) if isinstance(elem, float) else p for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"cannot parse value '{raw}': {e}") from None


@dataclass
class RunSettings:
    """Fully-resolved configuration for one CLI run."""

    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def corpus_spec(self, seed_offset: int = 0) -> dt.CorpusSpec:
        d = self.values["data"]
        return dt.CorpusSpec(
            vocab_src=d["vocab_src"], vocab_tgt=d["vocab_tgt"],
            frames_per_token=d["frames_per_token"], frame_dim=d["frame_dim"],
            frame_noise=d["frame_noise"], rule_seed=d["rule_seed"],
            min_tokens=d["min_tokens"], max_tokens=d["max_tokens"],
            max_target_len=d["max_target_len"],
            size=d["train_size"] + d["test_size"],
            seed=self.values["run"]["seed"] + seed_offset,
        )

    def corruption_spec(self) -> dt.CorruptionSpec:
        c = self.values["corruption"]
        return dt.CorruptionSpec(kind=c["kind"], rho=c["rho"], spans=c["spans"],
                                 burst_scale=c["burst_scale"],
                                 interference_gain=c["interference_gain"])

    def model_config(self) -> md.SemanticPipelineConfig:
        m = dict(self.values["model"])
        if m.pop("preset") == "paper":
            return md.paper_preset()
        d = self.values["data"]
        return md.SemanticPipelineConfig(
            frame_dim=d["frame_dim"], vocab_src=d["vocab_src"], vocab_tgt=d["vocab_tgt"],
            max_len=d["max_target_len"], frames_per_token=d["frames_per_token"], **m)

    def train_config(self, stage: int) -> pl.TrainConfig:
        t = self.values["train"]
        return pl.TrainConfig(
            stage=stage, steps=t[f"stage{stage}_steps"], batch_size=t["batch_size"],
            lr=t["lr"], lr_disc=t["lr_disc"], snr_lo=t["snr_lo"], snr_hi=t["snr_hi"],
            channel_kind=t["channel_kind"], seed=self.values["run"]["seed"],
            k_gen=t["k_gen"], eval_every=t["eval_every"],
            loss_cfg=ls.LossConfig(kappa=t["kappa"], xi=t["xi"],
                                   smoothing_mass_rule=t["smoothing_rule"]),
        )

    def sweep_config(self) -> ev.SweepConfig:
        e = self.values["eval"]
        return ev.SweepConfig(
            snrs_db=tuple(float(s) for s in e["snrs_db"]),
            channels=tuple(e["channels"]), systems=tuple(e["systems"]),
            n_utterances=e["n_utterances"], seed=self.values["run"]["seed"],
            embedding_seed=e["embedding_seed"], embedding_dim=e["embedding_dim"],
        )


def _check_key(section: str, key: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown section '[{section}]' "
                          f"(valid: {', '.join(sorted(DEFAULTS))})")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key '{key}' in [{section}] "
                          f"(valid: {', '.join(sorted(DEFAULTS[section]))})")


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got '{stripped}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key=value before any [section]")
        key, _, value = stripped.partition("=")
        out[section][key.strip()] = value.strip()
    return out


def resolve(config_path=None, overrides: list[str] | None = None, seed: int | None = None,
            ) -> RunSettings:
    """Defaults <- config file <- --set overrides (last wins) <- --seed."""
    values = {sec: dict(kv) for sec, kv in DEFAULTS.items()}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as f:
            parsed = parse_config_text(f.read())
        for section, kv in parsed.items():
            for key, raw in kv.items():
                _check_key(section, key)
                values[section][key] = _parse_value(raw, DEFAULTS[section][key])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not section.key=value")
        dotted, _, raw = item.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override '{item}' is not section.key=value")
        section, _, key = dotted.partition(".")
        _check_key(section.strip(), key.strip())
        values[section.strip()][key.strip()] = _parse_value(raw, DEFAULTS[section][key.strip()])
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunSettings(values=values)


def format_settings(settings: RunSettings) -> str:
    """Canonical text form, suitable for the per-run config echo."""
    lines = []
    for section in sorted(settings.values):
        lines.append(f"[{section}]")
        for key in sorted(settings.values[section]):
            val = settings.values[section][key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
