"""Learned through-plane interpolation of CT slices with voxel flow."""
from .baselines import linear_interpolate, nn_interpolate
from .flownet import FlowField, FlowInterpolator, FlowNetConfig, flow_forward, init_flownet, interpolate, synthesize
from .metrics import MetricReport, asd, psnr, seg_overlap, ssim
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, degrade_thickness, generate, random_spec
from .upsample import upsample_volume
from .volume import SegVolume, SliceTriplet, Volume, extract_triplets, window_normalize

__version__ = "0.1.0"
