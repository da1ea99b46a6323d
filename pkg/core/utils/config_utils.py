import os
import threading

from ruamel.yaml import YAML

CONFIG_PATH = 'config.yaml'
EXAMPLE_CONFIG_PATH = 'config.example.yaml'
lock = threading.Lock()

yaml = YAML()
yaml.preserve_quotes = True

# -----------------------
# load config
# -----------------------

def _config_file():
    if os.path.exists(CONFIG_PATH):
        return CONFIG_PATH
    # fall back to the shipped example next to the project root
    root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    for candidate in (EXAMPLE_CONFIG_PATH, os.path.join(root, EXAMPLE_CONFIG_PATH)):
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"Neither {CONFIG_PATH} nor {EXAMPLE_CONFIG_PATH} found")


def load_key(key):
    with lock:
        with open(_config_file(), 'r', encoding='utf-8') as file:
            data = yaml.load(file)

    keys = key.split('.')
    value = data
    for k in keys:
        if isinstance(value, dict) and k in value:
            value = value[k]
        else:
            raise KeyError(f"Key '{k}' not found in configuration")
    return value


def load_key_or(key, default):
    try:
        return load_key(key)
    except (KeyError, FileNotFoundError):
        return default


# -----------------------
# yaml documents
# -----------------------

def to_plain(node):
    """ruamel containers -> plain dict/list/float tree."""
    if isinstance(node, dict):
        return {str(k): to_plain(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [to_plain(v) for v in node]
    if node is None or isinstance(node, bool):
        return node
    if isinstance(node, str):
        return str(node)
    if isinstance(node, int):
        return int(node)
    if isinstance(node, float):
        return float(node)
    return node


def load_yaml(path):
    with open(path, 'r', encoding='utf-8') as file:
        data = YAML(typ='safe').load(file)
    return to_plain(data) if data is not None else {}


def output_dir():
    return os.environ.get("TCS_OUTPUT_DIR") or load_key_or("output.dir", "output")


