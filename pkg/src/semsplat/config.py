"""Shipped default constants (read once from ``data/defaults.json``)."""

import json
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load_defaults():
    text = resources.files("semsplat").joinpath("data/defaults.json").read_text()
    return json.loads(text)


def default(section, key):
    return load_defaults()[section][key]
