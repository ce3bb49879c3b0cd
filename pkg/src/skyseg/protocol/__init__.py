from .messages import (
    HEADER_SIZE,
    FinalResult,
    Message,
    Refinement,
    StatShare,
    TaskAssign,
    decode,
    encode,
    payload_breakdown,
    quantize_half,
)
from .network import NetworkModel, transmission_time
from .orchestrator import (
    TTA_MODES,
    FollowerNode,
    LeaderNode,
    MessageLog,
    MissionTrace,
    RoundConfig,
    RoundReport,
    corruption_at,
    init_tta,
    run_mission,
    run_round,
)
