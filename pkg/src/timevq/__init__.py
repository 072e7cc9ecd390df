"""Two-band vector-quantized generative modeling for univariate time series."""

from .autoencoder import EncDecConfig, OptimConfig, Stage1Config, Stage1Model, train_stage1
from .dataset import TimeSeriesDataset, batches, load_ucr, load_ucr_dataset, normalize
from .fcnmetrics import FcnModel, MetricReport, fid, inception_score, train_fcn
from .prior import PriorConfig, Stage2Model, train_stage2
from .sampler import GenerationRequest, decode_pass, generate, mask_schedule
from .tfr import StftConfig, band_split, istft, length_match, stft

__version__ = "0.1.0"
