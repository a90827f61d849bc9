from detworam import errors
from detworam import device
from detworam import crypto
from detworam import core
from detworam import trie
from detworam import layout
from detworam import baselines
from detworam import verifier
from detworam import container
from detworam import bench
from detworam import visualizations
