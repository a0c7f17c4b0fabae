"""Python access to the recursor C++ core.

Configs are plain dicts here; they are validated by the same parser the CLI uses.
"""

import json as _json

from ._core import *  # noqa: F401,F403
from ._core import (
    config_hash_from_json as _config_hash_from_json,
    flops_from_json as _flops_from_json,
    load_config_json as _load_config_json,
)


def load_config(path):
    """Validated run config with defaults filled in."""
    return _json.loads(_load_config_json(str(path)))


def config_hash(config):
    """16-hex-digit hash of a config dict; the seed does not contribute."""
    return _config_hash_from_json(_json.dumps(config))


def flops(config, seq_len=None, tokens=20e9, count_head=False):
    """Parameter, FLOPs and cache accounting for a config dict."""
    return _flops_from_json(_json.dumps(config), seq_len, tokens, count_head)
