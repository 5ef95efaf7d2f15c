"""
Generates experiment configs with flexible params for testing purposes
"""

import copy
import json
import os
import shutil

from config.test_params import PARENT_CONFIG, TEST_EXPERIMENT_CONFIG_PATH, TEST_PATH


def generate_config(overrides: dict, path: str = TEST_EXPERIMENT_CONFIG_PATH, drop: tuple = ()) -> str:
    with open(PARENT_CONFIG, encoding='utf-8') as f:
        config = json.load(f)
    config = copy.deepcopy(config)
    config.update(overrides)
    for key in drop:
        config.pop(key, None)

    if os.path.exists(TEST_PATH):
        shutil.rmtree(TEST_PATH)
    os.mkdir(TEST_PATH)
    with open(path, "w", encoding='utf-8') as f:
        json.dump(config, f)
    return path
