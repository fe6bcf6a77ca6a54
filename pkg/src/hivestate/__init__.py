"""Beehive queen-state recognition from audio: HHT/EMD, Mel and MFCC features,
an SMO-trained RBF SVM, a small numpy CNN, and random vs. hive-independent
evaluation."""

__version__ = "0.1.0"
