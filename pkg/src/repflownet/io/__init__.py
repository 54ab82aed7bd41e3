from .config import ConfigError, Field, load_config, parse_text, read_config
from .flo import FloError, FloFile, decode_flo, encode_flo, read_flo, write_flo
from .flowviz import color_wheel, flow_to_ppm, flow_to_rgb, wheel_position
from .pgm import FormatError, decode_pgm, encode_pgm, read_pgm, write_pgm
