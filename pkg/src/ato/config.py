"""Run configuration: sectioned INI text with defaults and key=value overrides."""
from dataclasses import dataclass, field
import configparser
import hashlib
import os

SECTIONS = {
    "run": {"seed": 0, "name": "ato"},
    "model": {"preset": "tiny-cnn", "layers": "", "input": "3,8,8",
              "protect_stem": True, "protect": ""},
    "data": {"source": "synthetic", "n_train": 5000, "n_test": 1000, "n_classes": 10,
             "separation": 1.0, "train_images": "", "train_labels": "",
             "test_images": "", "test_labels": ""},
    "optimizer": {"optimizer": "sgd", "lr": 0.1, "momentum": 0.9, "beta": 0.999,
                  "eps_adam": 1e-8, "schedule": "recipe", "c_hat": 1.0, "c_bar": 100.0,
                  "c1": 10.0, "weight_decay": 0.0, "batch": 64,
                  "lambda": 10.0, "projector": "prox", "epsilon_hs": 0.05},
    "controller": {"p": 0.5, "gamma": 4.0, "cn_lr": 0.001, "d_cn_fraction": 0.05,
                   "cn_batch": 256, "reg_mask": "emitted", "cn_optimizer": "per_pass"},
    "schedule": {"epochs": 100, "warmup_frac": 0.2, "start_frac": 0.1, "end_frac": 0.5,
                 "t_w": -1, "t_start": -1, "t_end": -1},
}


class ConfigError(ValueError):
    pass


def _convert(default, text, key):
    if isinstance(default, bool):
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return str(text)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: dict(kv) for s, kv in SECTIONS.items()})

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, key, text):
        section, name = resolve_key(key)
        self.values[section][name] = _convert(SECTIONS[section][name], text, key)
        return self

    def copy(self):
        return RunConfig({s: dict(kv) for s, kv in self.values.items()})

    @property
    def epochs(self):
        return self.values["schedule"]["epochs"]

    def window(self):
        """(T_w, T_start, T_end) in epochs, derived from fractions unless set."""
        s = self.values["schedule"]
        T = s["epochs"]
        t_w = s["t_w"] if s["t_w"] >= 0 else round(s["warmup_frac"] * T)
        t_start = s["t_start"] if s["t_start"] >= 0 else round(s["start_frac"] * T)
        t_end = s["t_end"] if s["t_end"] >= 0 else round(s["end_frac"] * T)
        return t_w, t_start, t_end

    def validate(self):
        T = self.epochs
        t_w, t_start, t_end = self.window()
        p = self.values["controller"]["p"]
        if T < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < p <= 1:
            raise ConfigError("p must lie in (0, 1]")
        if self.values["optimizer"]["batch"] < 1:
            raise ConfigError("batch must be >= 1")
        if t_w > T:
            raise ConfigError("t_w must not exceed the number of epochs")
        if t_start <= T and not 0 <= t_start <= t_end:
            raise ConfigError("need 0 <= t_start <= t_end")
        if self.values["optimizer"]["lambda"] < 0:
            raise ConfigError("lambda must be nonnegative")
        if not 0 < self.values["controller"]["d_cn_fraction"] <= 1:
            raise ConfigError("d_cn_fraction must lie in (0, 1]")
        c = self.values["controller"]
        if c["reg_mask"] not in ("emitted", "sampled"):
            raise ConfigError("reg_mask must be 'emitted' or 'sampled'")
        if c["cn_optimizer"] not in ("per_pass", "persistent"):
            raise ConfigError("cn_optimizer must be 'per_pass' or 'persistent'")
        if c["cn_batch"] < 1:
            raise ConfigError("cn_batch must be >= 1")
        return self

    def to_text(self):
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for key, val in kv.items():
                text = str(val)
                if "\n" in text:
                    text = "\n".join("    " + ln if i else ln for i, ln in enumerate(text.splitlines()))
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:10]


def resolve_key(key):
    if "." in key:
        section, name = key.split(".", 1)
        if section in SECTIONS and name in SECTIONS[section]:
            return section, name
        raise ConfigError(f"unknown config key {key!r}")
    hits = [s for s, kv in SECTIONS.items() if key in kv]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; qualify it as section.key")
    return hits[0], key


def parse_text(text, overrides=(), env=None):
    """Build a RunConfig from INI text; overrides beat ATO_SEED, which beats the file."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg.set(f"{section}.{key}", val.strip())
    env = os.environ if env is None else env
    if env.get("ATO_SEED"):
        cfg.set("run.seed", env["ATO_SEED"])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        cfg.set(key.strip(), val.strip())
    return cfg.validate()


def load(path, overrides=(), env=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_text(text, overrides, env)
