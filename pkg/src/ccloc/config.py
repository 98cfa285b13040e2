"""Run configuration: a versioned JSON document with dotted-path overrides."""
import copy
import hashlib
import json
from importlib import resources

from .charting import TrainConfig
from .csi import PilotConfig
from .scene import SceneConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; ``path`` names the offending key."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


def defaults():
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 1,
        "scene": SceneConfig().to_dict(),
        "pilot": PilotConfig().to_dict(),
        "dataset": {"n_labeled": 600, "n_unlabeled": 1400, "train_fraction": 0.85, "split_seed": 0},
        "train": _train_defaults(),
        # per-mode overrides of "train" keys, e.g. {"sup": {"lr": 0.003}}
        "train_modes": {"semi": {}, "unsup": {}, "sup": {}},
        "eval": {"ks": [1, 2, 5, 10, 15, 20, 30, 40, 50], "error_threshold": 2.0},
        "repro": {"scenes": ["los_dominant", "nlos_dominant"], "modes": ["semi", "unsup", "sup"],
                  "seeds": [0, 1, 2]},
    }


# keys whose default is None accept these types
_NULLABLE = {"pilot.pilot_symbols": (list,)}


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "number"
    return type(v).__name__


def _check_tree(value, template, path):
    if isinstance(template, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {_kind(value)}")
        for key in value:
            sub = f"{path}.{key}" if path else key
            if key not in template:
                raise ConfigError(sub, "unknown key")
            _check_tree(value[key], template[key], sub)
        return
    if template is None:
        allowed = _NULLABLE.get(path, ())
        if value is not None and not isinstance(value, allowed):
            raise ConfigError(path, f"expected null or {[t.__name__ for t in allowed]}")
        return
    if _kind(value) != _kind(template):
        raise ConfigError(path, f"expected {_kind(template)}, got {_kind(value)}")
    if isinstance(template, list) and template:
        for i, item in enumerate(value):
            if _kind(item) != _kind(template[0]):
                raise ConfigError(f"{path}[{i}]", f"expected {_kind(template[0])}, got {_kind(item)}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text):
    """``a.b.c=value`` -> (["a", "b", "c"], value); value is JSON when it parses."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg, overrides):
    cfg = copy.deepcopy(cfg)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = cfg
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node.get(k), dict):
                raise ConfigError(".".join(keys[:i + 1]), "not an object in the config")
            node = node[k]
        node[keys[-1]] = value
    return cfg


def _field_path(section, fields, message):
    # validation messages lead with the field name; point at it when possible
    head = message.split(" ", 1)[0].strip("'\"[]")
    return f"{section}.{head}" if head in fields else section


def validate(cfg):
    """Check structure and value ranges; returns the fully defaulted config."""
    if not isinstance(cfg, dict):
        raise ConfigError("", "config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    template = defaults()
    for mode, over in (cfg.get("train_modes") or {}).items():
        if isinstance(over, dict) and mode in template["train_modes"]:
            template["train_modes"][mode] = {k: template["train"][k] for k in over if k in template["train"]}
    _check_tree(cfg, template, "")
    full = _merge(template, cfg)
    builders = [("scene", scene_config), ("pilot", pilot_config), ("train", train_config)]
    builders += [(f"train_modes.{m}", lambda c, m=m: train_config(c, mode=m)) for m in full["train_modes"]]
    for section, build in builders:
        try:
            build(full)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(_field_path(section, full["train"] if "." in section else full[section], str(exc)),
                              str(exc)) from exc
    ds = full["dataset"]
    for key in ("n_labeled", "n_unlabeled", "split_seed"):
        if int(ds[key]) != ds[key] or ds[key] < 0:
            raise ConfigError(f"dataset.{key}", "must be a non-negative integer")
    if not 0 < ds["train_fraction"] < 1:
        raise ConfigError("dataset.train_fraction", "must be in (0, 1)")
    if int(full["seed"]) != full["seed"]:
        raise ConfigError("seed", "must be an integer")
    if any(int(k) != k or k < 1 for k in full["eval"]["ks"]):
        raise ConfigError("eval.ks", "must be positive integers")
    rep = full["repro"]
    for i, mode in enumerate(rep["modes"]):
        if mode not in ("semi", "unsup", "sup"):
            raise ConfigError(f"repro.modes[{i}]", f"unknown mode {mode!r}")
    for i, s in enumerate(rep["scenes"]):
        try:
            SceneConfig.from_dict({**full["scene"], "bs_mode": s}).validate()
        except ValueError as exc:
            raise ConfigError(f"repro.scenes[{i}]", str(exc)) from exc
    return full


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return validate(apply_overrides(raw, overrides))


def bundled(name):
    """Path-like handle to a shipped config (``desk`` or ``full``)."""
    return resources.files("ccloc").joinpath("configs", f"{name}.json")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def scene_config(cfg, bs_mode=None):
    d = dict(cfg["scene"])
    if bs_mode is not None:
        d["bs_mode"] = bs_mode
    sc = SceneConfig.from_dict(d)
    sc.validate()
    return sc


def pilot_config(cfg):
    return PilotConfig.from_dict(cfg["pilot"])


def train_config(cfg, seed=0, mode=None):
    """TrainConfig for ``mode``: the ``train`` section with that mode's overrides applied."""
    over = cfg.get("train_modes", {}).get(mode, {}) if mode else {}
    return TrainConfig.from_dict({**cfg["train"], **over, "seed": int(seed)})
