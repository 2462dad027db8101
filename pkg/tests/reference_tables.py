"""Published layer ledgers for the full-size network, frozen for parity tests.

Resblock counts are per block instance.
"""

BACKBONE_ROWS = [
    # name, output shape, params (None = no learnable parameters)
    ("conv1", (124, 118, 96), 2_496),
    ("mfm1", (124, 118, 48), None),
    ("pool1", (62, 59, 48), None),
    ("resblock1", (62, 59, 48), 83_136),
    ("conv2a", (62, 59, 96), 4_704),
    ("mfm2a", (62, 59, 48), None),
    ("conv2", (62, 59, 192), 83_136),
    ("mfm2", (62, 59, 96), None),
    ("pool2", (31, 30, 96), None),
    ("resblock2", (31, 30, 96), 332_160),
    ("conv3a", (31, 30, 192), 18_624),
    ("mfm3a", (31, 30, 96), None),
    ("conv3", (31, 30, 384), 332_160),
    ("mfm3", (31, 30, 192), None),
    ("pool3", (16, 15, 192), None),
    ("resblock3", (16, 15, 192), 1_327_872),
    ("conv4a", (16, 15, 384), 74_112),
    ("mfm4a", (16, 15, 192), None),
    ("conv4", (16, 15, 256), 442_624),
    ("mfm4", (16, 15, 128), None),
    ("resblock4", (16, 15, 128), 590_336),
    ("conv5a", (16, 15, 256), 33_024),
    ("mfm5a", (16, 15, 128), None),
    ("conv5", (16, 15, 256), 295_168),
    ("mfm5", (16, 15, 128), None),
    ("pool4", (8, 8, 128), None),
    ("linear", (512,), 4_194_816),
    ("mfm6", (256,), None),
]

RESBLOCK_REPEATS = {"resblock1": 1, "resblock2": 2, "resblock3": 3, "resblock4": 4}

DENSE_ROWS = [
    ("bn", (16, 15, 192), 384),
    ("conv1", (16, 15, 48), 82_992),
    ("conv2", (16, 15, 48), 20_784),
    ("conv3", (16, 15, 48), 41_520),
    ("conv4", (16, 15, 48), 62_256),
]
DENSE_OUTPUT = (16, 15, 192)
DENSE_TOTAL = 207_936
