"""Simulator of a multi-path processor frontend (LSD / DSB / MITE) and attacks built on it."""

from .frontend import (DsbGeometry, Frontend, FrontendCounters, L1iGeometry, LsdGeometry, MixBlock,
                       Path, canonical_block, dsb_set_index, l1i_set_index, lsd_try_capture,
                       misalignment_rule)
from .timing import CostModel, cost_of, measure_sequence, rapl_sample
from .channels import (BitMessage, ChannelParams, CovertChannel, calibrate_threshold, run_bit,
                       transmit)
from .evaluation import ChannelReport, edit_distance, gen_message, sweep_d, transmission_rate

__version__ = "0.1.0"
