"""
Version information for the SeqComm-DFL engine.
"""

__version__ = "0.1.0"
__app_name__ = "SeqComm-DFL"
__description__ = "Decision-focused multi-agent learning with value-aware sequential communication"
__author__ = "EricA1019"
__license__ = "MIT"

# Version history
VERSION_HISTORY = {
    "0.1.0": {
        "date": "2026-10-18",
        "description": "Training and evaluation engine",
        "features": [
            "Reverse-mode differentiation core with Hessian-vector products",
            "Message encoder, refinement net, world model and monotone-mixing critic",
            "Hospital Dec-POMDP and tabular oracle environments",
            "Value-aware messaging, guidance-potential ordering, sequential selection",
            "Bilevel critic training with conjugate-gradient hypergradients",
            "Seeded experiment runner with comparison, ablation and selftest modes"
        ],
        "hops_completed": [
            "Differentiation Core",
            "Networks and Environments",
            "Communication Protocol",
            "Bilevel Optimizer",
            "Trainer and Experiment Runner"
        ]
    }
}
