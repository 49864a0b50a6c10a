"""
Configuration settings for the lung nodule segmentation pipeline
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Pipeline configuration (built-in defaults, overridable from the environment)"""

    # Numeric precision of training tensors: 'float32' or 'float64'
    DTYPE = os.getenv('NODULE_DTYPE', 'float32')

    # Hard cap on loader / bench producer threads
    MAX_WORKERS = int(os.getenv('NODULE_MAX_WORKERS', str(os.cpu_count() or 1)))

    LOG_LEVEL = os.getenv('LOGLEVEL', 'INFO').upper()

    # CT lung window (HU)
    WINDOW_CENTER = float(os.getenv('WINDOW_CENTER', '-500'))
    WINDOW_WIDTH = float(os.getenv('WINDOW_WIDTH', '1600'))

    # Dataset splitting
    SPLIT_RATIOS = (0.8, 0.1, 0.1)
    SPLIT_SEED = int(os.getenv('SPLIT_SEED', '0'))
    MASK_SUFFIX = '_mask.png'

    # U-Net topology
    UNET_LEVELS = int(os.getenv('UNET_LEVELS', '5'))
    UNET_BASE_CHANNELS = int(os.getenv('UNET_BASE_CHANNELS', '64'))

    # Training
    EPOCHS = int(os.getenv('EPOCHS', '200'))
    BATCH_SIZE = int(os.getenv('BATCH_SIZE', '12'))
    LEARNING_RATE = float(os.getenv('LEARNING_RATE', '1e-4'))
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    DICE_SMOOTH = 1.0
    BLACK_FRAC = float(os.getenv('BLACK_FRAC', '0.02'))
    FINETUNE_EPOCHS = int(os.getenv('FINETUNE_EPOCHS', '10'))
    SEED = int(os.getenv('SEED', '0'))

    # Dataloader (tuned values for two producers)
    LOADER_WORKERS = int(os.getenv('LOADER_WORKERS', str(min(2, MAX_WORKERS))))
    QUEUE_RATIO = int(os.getenv('QUEUE_RATIO', '8'))

    # Evaluation
    THRESHOLD = 0.5
    REFERENCE_DICE = 0.75
    REFERENCE_IOU = 0.73

    @classmethod
    def validate(cls):
        """Validate environment-derived configuration"""
        if cls.DTYPE not in ('float32', 'float64'):
            raise ValueError(f"NODULE_DTYPE must be float32 or float64, got {cls.DTYPE!r}")
        if cls.MAX_WORKERS < 1:
            raise ValueError("NODULE_MAX_WORKERS must be >= 1")
        if cls.WINDOW_WIDTH <= 0:
            raise ValueError("WINDOW_WIDTH must be > 0")
        return True


config = Config()
