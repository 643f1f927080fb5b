"""Live volume rendering and steering for domain-decomposed simulations.

Ranks render their local sub-volumes by ray casting over zero-copy field
accessors and runtime functor chains, composite the partial images with
visibility-ordered binary swap, and stream frames through an aggregating
gateway to interactive steering clients.
"""

from .fields import (
    FieldVector,
    GlobalVolume,
    LocalDomain,
    SourceDescriptor,
    SourceHandle,
    SourceRegistry,
    sample,
    snapshot_non_persistent,
    update_sources,
)
from .functors import (
    ChainLimits,
    FunctorChain,
    FunctorDescriptor,
    FunctorRegistry,
    default_registry,
    eval_chain,
    parse_chain,
    reduce_to_scalar,
)
from .scene import (
    Camera,
    ClipPlane,
    RenderSettings,
    SceneState,
    TransferFunction,
    classify,
    clip_plane,
    tf_from_points,
)
from .raycast import LocalImage, gradient_normal, march_ray, ray_box_intersection, render_local
from .compositing import binary_swap, composite_sequential, over, visibility_order
from .transport import LocalFabric, LocalTransport, Transport, run_ranks
from .runtime import (
    FrameStreamer,
    RankContext,
    apply_steering,
    broadcast_scene,
    encode_frame,
    frame_pipeline,
    merge_metadata,
)

__version__ = "0.1.0"
