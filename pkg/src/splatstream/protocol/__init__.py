"""Wire format shared by server and client: framing, quantizers, snapshot
and delta codecs, and the small structural packets. protocol.md at the repo
root is the normative byte layout."""

from .framing import (
    MAGIC,
    MAX_PAYLOAD,
    AttributeId,
    Frame,
    FrameParser,
    PacketType,
    ProtocolError,
    frame_bytes,
    parse_frame,
)
from .quantize import (
    decode_varints,
    dequantize_uniform,
    encode_varints,
    pack_bits,
    quantize_uniform,
    unpack_bits,
)
from .snapshot import (
    COMPRESSION_NONE,
    COMPRESSION_ZLIB,
    PROFILE_DEFAULT,
    PROFILE_LOSSLESS,
    QuantizationProfile,
    decode_snapshot,
    encode_snapshot,
)
from .delta import (
    ATTRIBUTE_QUANTIZERS,
    RESIDUAL_ATTRIBUTES,
    DeltaBaselines,
    apply_delta,
    decode_delta,
    encode_delta,
)
from .packets import (
    decode_camera_pose,
    decode_light_state,
    decode_light_visibility,
    decode_object_id_map,
    decode_object_transforms,
    decode_ordering,
    decode_tensor_metadata,
    encode_camera_pose,
    encode_light_state,
    encode_light_visibility,
    encode_object_id_map,
    encode_object_transforms,
    encode_ordering,
    encode_tensor_metadata,
)

__all__ = [name for name in dir() if not name.startswith("_")]
