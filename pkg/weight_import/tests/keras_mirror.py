"""Build Keras models that mirror the consuming engine's architecture.

Layers are named after their MAXW target tensors (dots replaced by
underscores) so checkpoint datasets can be paired with targets reliably
regardless of the HDF5 layout the installed Keras generation writes.
"""

import numpy as np

from headseg.unet import layer_manifest

from weight_import.mapping import MapEntry


def build_mirror(config, seed=0):
    """Functional Keras twin of UNet(config), channels-last, named layers."""
    import tensorflow as tf
    from tensorflow.keras import layers

    tf.keras.utils.set_random_seed(seed)
    size = 2 ** config.depth * 4
    image = layers.Input((size, size, config.in_channels), name="image")
    coords = layers.Input((size, size, config.coord_channels), name="coords")

    x = image
    skips = []
    for l in range(config.depth):
        f = config.filters(l)
        x = layers.Conv2D(f, 3, padding="same", activation="relu", name=f"enc{l}_conv1")(x)
        x = layers.Conv2D(f, 3, padding="same", activation="relu", name=f"enc{l}_conv2")(x)
        skips.append(x)
        x = layers.MaxPooling2D(2, name=f"enc{l}_pool")(x)
    for l in range(config.depth - 1, -1, -1):
        f = config.filters(l)
        x = layers.Conv2DTranspose(f, 2, strides=2, padding="valid", name=f"dec{l}_up")(x)
        x = layers.Concatenate(name=f"dec{l}_cat")([x, skips[l]])
        x = layers.Conv2D(f, 3, padding="same", activation="relu", name=f"dec{l}_conv1")(x)
        if l == 0 and config.coord_channels:
            x = layers.Concatenate(name="dec0_coords")([x, coords])
        x = layers.Conv2D(f, 3, padding="same", activation="relu", name=f"dec{l}_conv2")(x)
    if config.coord_channels:
        x = layers.Concatenate(name="head_coords")([x, coords])
    out = layers.Conv2D(config.classes, 1, activation="softmax", name="head")(x)
    return tf.keras.Model([image, coords], out)


def predictor(model):
    """Adapt a channels-last Keras model to the engine's (C,H,W) layout."""

    def predict(image, coords):
        img = np.transpose(image, (1, 2, 0))[np.newaxis]
        crd = np.transpose(coords, (1, 2, 0))[np.newaxis]
        out = model([img, crd], training=False)
        return np.transpose(np.asarray(out)[0], (2, 0, 1))

    return predict


def explicit_mapping(config, checkpoint_tensors):
    """Pair checkpoint datasets with targets through the mirror layer names."""
    entries = []
    for target, shape in layer_manifest(config):
        layer = target.rsplit(".", 1)[0].replace(".", "_")
        kind = target.rsplit(".", 1)[1]
        needle = "kernel" if kind == "W" else "bias"
        candidates = [
            p for p in checkpoint_tensors
            if f"{layer}/" in p or p.startswith(f"{layer}/") or f"/{layer}/" in p
        ]
        matches = [p for p in candidates if needle in p]
        if len(matches) != 1:
            raise LookupError(
                f"cannot uniquely locate {needle} for layer {layer}: {matches}"
            )
        if kind == "b":
            rule = "none"
        elif target.endswith("up.W"):
            rule = "tconv_kernel"
        else:
            rule = "conv_kernel"
        entries.append(MapEntry(matches[0], target, rule))
    return entries


def save_h5_weights(model, path):
    """Write weights as HDF5 across Keras generations."""
    path = str(path)
    try:
        model.save_weights(path)
    except ValueError:
        # newer Keras insists on the .weights.h5 suffix
        alt = path if path.endswith(".weights.h5") else path + ".weights.h5"
        model.save_weights(alt)
        return alt
    return path
