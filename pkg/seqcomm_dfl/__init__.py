"""SeqComm-DFL: decision-focused multi-agent learning with value-aware sequential communication."""
from seqcomm_dfl.version import __version__
