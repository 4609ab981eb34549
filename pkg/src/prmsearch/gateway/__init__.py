from .base import ActorModel, RewardModel, prm_step_score, sample_critiques
from .mock import ScriptedActor, ScriptedRewardModel
from .prompts import TEMPLATES, build_prompt
from .remote import ChatClient, EndpointConfig, RemoteActor, RemoteRewardModel, remote_generate

__all__ = [
    "ActorModel",
    "RewardModel",
    "prm_step_score",
    "sample_critiques",
    "ScriptedActor",
    "ScriptedRewardModel",
    "TEMPLATES",
    "build_prompt",
    "ChatClient",
    "EndpointConfig",
    "RemoteActor",
    "RemoteRewardModel",
    "remote_generate",
]
