"""Find the speckle scale giving the configured bubble-over-background contrast.

Usage: python -m scripts.calibrate_speckle [--config run.json] [--target-db 25]
"""

import argparse
import logging

from src.config import get_log_level, load_config
from src.simulator import calibrate_speckle_scale

logging.basicConfig(
    level=get_log_level(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="JSON configuration")
    parser.add_argument("--target-db", type=float, default=25.0)
    parser.add_argument("--iterations", type=int, default=3)
    args = parser.parse_args()
    try:
        config = load_config(args.config)
        scale = calibrate_speckle_scale(config.probe_geometry(), config.transmit_scheme(), config.image_grid(),
                                        config.phantom.speckle_density, args.target_db, args.iterations,
                                        config.seed, config.phantom.speckle_scale)
        logger.info(f"Set phantom.speckle_scale to {scale:.6g} for {args.target_db} dB")
    except Exception as e:
        logger.error(f"Calibration failed: {e}")
        raise


if __name__ == "__main__":
    main()
