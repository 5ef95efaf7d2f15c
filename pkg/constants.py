"""
Useful constant variables
"""

import os

PROJECT_ROOT = os.path.dirname(os.path.realpath(__file__))
ASSETS_PATH = os.path.join(PROJECT_ROOT, 'tmp', 'artifacts')
SCENARIOS_PATH = os.path.join(PROJECT_ROOT, 'scenarios')

EXPERIMENT_CONFIG_PATH = os.path.join(PROJECT_ROOT, 'experiment_config.json')
LOGGING_CONFIG_PATH = os.path.join(PROJECT_ROOT, 'fklab_logging.ini')

OUTPUT_ROOT_ENV = 'FKLAB_OUTPUT_ROOT'
CODE_VERSION = '0.3.0'

# estimators
MIN_SAMPLES = 50
ESS_FLOOR_FRACTION = 0.01
LOG_FLOOR_FRACTION = 1e-3
MIN_COVERAGE = 0.9
PATH_CHUNK = 4096

# oracle and quadrature
PDE_LOG_FLOOR = 1e-300
KATO_THRESHOLD = 1e-2
QUADRATURE_TOLERANCE = 1e-6
