"""Age-group classification and age regression from pediatric eye and iris images."""

from .config import RunConfig, load_config
from .dataman import AgeGroup, Modality, SampleRecord, Sensor, SynthParams
from .evaluation import cross_sensor_eval, evaluate, saliency_map
from .multitask import MultiTaskOutput, SampleSet, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AgeGroup", "Modality", "MultiTaskOutput", "RunConfig", "SampleRecord", "SampleSet", "Sensor",
    "SynthParams", "TrainConfig", "cross_sensor_eval", "evaluate", "load_config", "saliency_map",
    "train",
]
