"""Actor-critic control of a highway on-ramp merge over an aperiodic V2X channel."""

from .agents import BlindAgent, ClassicAgent, MotionModelAgent, blind_target, classic_td_target, make_agent
from .channel import V2XChannel
from .config import ChannelConfig, EnvConfig, AgentConfig, RunConfig, TuneSpec
from .env import MergeEnv

__version__ = "0.1.0"
