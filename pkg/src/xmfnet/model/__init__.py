from .config import ModelConfig, paper_config, toy_config
from .decoder import Branch, Decoder
from .encoders import EdgeConv, ImageEncoder, PointEncoder, SAGPool, edge_function, sag_pool
from .fusion import AttentionBlock, Fusion, cross_attention, multihead_attention
from .layers import Conv2d, LayerNorm, Linear, MLP, Module
from .xmfnet import XMFNet, complete
