"""A small anchor-free, single-stage grid detector written in numpy.

Each cell of a stride-8 output grid predicts an objectness logit, class
logits and a box: center offset inside the cell (sigmoid) and log-scale width
and height relative to a fixed reference size. Backpropagation is hand-written;
the scatter step of the convolution backward pass runs through
:mod:`sfdaca._accel`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import _accel
from ..core.boxes import Box, Detection
from ..core.model import DetectorModel, DimensionMismatchError, EmptyTargetsError

LEAK = 0.1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _im2col(x, k, stride, pad):
    """(n, h, w, c) -> (n, ho, wo, k, k, c) patch view, copied contiguous."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


class ToyDetector(DetectorModel):
    """Grid detector implementing :class:`~sfdaca.core.model.DetectorModel`.

    Args:
        num_classes: number of object classes.
        channels: output channels of the convolution stack.
        strides: stride of each 3x3 convolution; their product is the grid stride.
        ref_size: box size (pixels) that a zero log-scale prediction decodes to.
        score_floor: detections below this confidence are not reported.
        loss_scale: constant multiplier on the training loss. The default puts
            momentum SGD at lr 1e-3 in the stable regime for this network.
        nms_iou: class-agnostic NMS overlap threshold.
        seed: initialization seed.
    """

    def __init__(self, num_classes=3, channels=(8, 16, 32, 32, 32), strides=(2, 2, 2, 1, 1),
                 ref_size=24.0, score_floor=0.05, nms_iou=0.5, max_detections=100,
                 neg_weight=1.0, box_weight=2.0, loss_scale=0.05, seed=0, dtype="float32"):
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        self._init_kwargs = dict(num_classes=int(num_classes), channels=list(channels), strides=list(strides),
                                 ref_size=float(ref_size), score_floor=float(score_floor), nms_iou=float(nms_iou),
                                 max_detections=int(max_detections), neg_weight=float(neg_weight),
                                 box_weight=float(box_weight), loss_scale=float(loss_scale), seed=int(seed),
                                 dtype=np.dtype(dtype).name)
        self.num_classes = int(num_classes)
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.stride = int(np.prod(self.strides))
        self.ref_size = float(ref_size)
        self.score_floor = float(score_floor)
        self.nms_iou = float(nms_iou)
        self.max_detections = int(max_detections)
        self.neg_weight = float(neg_weight)
        self.box_weight = float(box_weight)
        self.loss_scale = float(loss_scale)
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.parameters = []
        cin = 3
        for cout in self.channels:
            fan_in = 9 * cin
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, cin, cout))
            self.parameters += [w.astype(self.dtype), np.zeros(cout, dtype=self.dtype)]
            cin = cout
        n_out = 5 + self.num_classes
        head_w = rng.normal(0.0, 0.01, size=(cin, n_out)).astype(self.dtype)
        head_b = np.zeros(n_out, dtype=self.dtype)
        head_b[0] = -4.0
        self.parameters += [head_w, head_b]
        self._cache = None

    def init_kwargs(self) -> dict:
        """Constructor arguments; rebuilding with them gives the same architecture and settings."""
        return dict(self._init_kwargs)

    @property
    def architecture(self) -> dict:
        return {
            "name": "toy_grid_detector",
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "dtype": self.dtype.name,
        }

    # -- forward / backward ---------------------------------------------------

    def _check_input(self, images):
        if images.ndim != 4 or images.shape[3] != 3:
            raise DimensionMismatchError(f"expected (n, h, w, 3) input, got {images.shape}")
        h, w = images.shape[1:3]
        if h % self.stride or w % self.stride or h == 0 or w == 0:
            raise DimensionMismatchError(f"image size {h}x{w} not divisible by stride {self.stride}")

    def forward(self, images, keep_cache=False):
        """Raw output maps of shape (n, gh, gw, 5 + num_classes)."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        self._check_input(x)
        x = x - 0.5
        cache = []
        for li, s in enumerate(self.strides):
            w, b = self.parameters[2 * li], self.parameters[2 * li + 1]
            cols = _im2col(x, 3, s, 1)
            n, ho, wo = cols.shape[:3]
            z = cols.reshape(n * ho * wo, -1) @ w.reshape(-1, w.shape[3]) + b
            z = z.reshape(n, ho, wo, -1)
            if keep_cache:
                cache.append((x.shape, cols, z))
            x = np.where(z > 0, z, LEAK * z)
        hw, hb = self.parameters[-2], self.parameters[-1]
        out = x @ hw + hb
        if keep_cache:
            self._cache = (cache, x)
        return out

    def backward(self, dout):
        cache, feat = self._cache
        grads = [None] * len(self.parameters)
        n, gh, gw, _ = dout.shape
        d2 = dout.reshape(-1, dout.shape[3])
        grads[-2] = feat.reshape(-1, feat.shape[3]).T @ d2
        grads[-1] = d2.sum(axis=0)
        dx = (d2 @ self.parameters[-2].T).reshape(feat.shape)
        for li in range(len(self.strides) - 1, -1, -1):
            in_shape, cols, z = cache[li]
            w = self.parameters[2 * li]
            dz = dx * np.where(z > 0, 1.0, LEAK)
            dz2 = dz.reshape(-1, dz.shape[3])
            grads[2 * li] = (cols.reshape(dz2.shape[0], -1).T @ dz2).reshape(w.shape)
            grads[2 * li + 1] = dz2.sum(axis=0)
            if li > 0:
                dcols = (dz2 @ w.reshape(-1, w.shape[3]).T).reshape(cols.shape)
                nb, h, wd, c = in_shape
                dx = _accel.col2im(dcols, nb, h, wd, c, 3, self.strides[li], 1)
        self._cache = None
        return grads

    # -- targets & loss ---------------------------------------------------------

    def encode_targets(self, targets: Sequence[Detection], gh: int, gw: int):
        """Per-cell training targets; larger boxes are written first so small ones win collisions."""
        pos = np.zeros((gh, gw), dtype=bool)
        cls = np.zeros((gh, gw), dtype=np.int64)
        box = np.zeros((gh, gw, 4))
        s = self.stride
        for t in sorted(targets, key=lambda d: -d.box.area):
            cx, cy = t.box.center
            j = min(int(cx // s), gw - 1)
            i = min(int(cy // s), gh - 1)
            pos[i, j] = True
            cls[i, j] = t.class_id
            box[i, j] = (
                np.clip(cx / s - j, 1e-3, 1 - 1e-3),
                np.clip(cy / s - i, 1e-3, 1 - 1e-3),
                np.log(t.box.width / self.ref_size),
                np.log(t.box.height / self.ref_size),
            )
        return pos, cls, box

    def _loss_from_output(self, out, pos, cls, box):
        """Loss and d(loss)/d(out) for one image's output map."""
        npos = max(int(pos.sum()), 1)
        obj = out[..., 0]
        cls_logits = out[..., 1:1 + self.num_classes]
        reg = out[..., 1 + self.num_classes:]
        g = np.zeros_like(out)

        t = pos.astype(out.dtype)
        wts = np.where(pos, 1.0, self.neg_weight)
        # BCE with logits: softplus(z) - t*z
        l_obj = np.sum(wts * (_softplus(obj) - t * obj)) / npos
        g[..., 0] = wts * (_sigmoid(obj) - t) / npos

        l_cls = 0.0
        l_box = 0.0
        if pos.any():
            lp = cls_logits[pos]
            m = lp.max(axis=1, keepdims=True)
            ex = np.exp(lp - m)
            sm = ex / ex.sum(axis=1, keepdims=True)
            idx = cls[pos]
            l_cls = -np.sum(np.log(sm[np.arange(len(idx)), idx] + 1e-300)) / npos
            gc = sm.copy()
            gc[np.arange(len(idx)), idx] -= 1.0
            g[..., 1:1 + self.num_classes][pos] = gc / npos

            rp = reg[pos]
            tb = box[pos]
            sxy = _sigmoid(rp[:, :2])
            pred = np.concatenate([sxy, rp[:, 2:]], axis=1)
            r = pred - tb
            # smooth-L1 with beta 1 on offsets and log sizes
            absr = np.abs(r)
            quad = absr < 1.0
            l_box = self.box_weight * np.sum(np.where(quad, 0.5 * r * r, absr - 0.5)) / npos
            dr = self.box_weight * np.where(quad, r, np.sign(r)) / npos
            dr[:, :2] *= sxy * (1.0 - sxy)
            g[..., 1 + self.num_classes:][pos] = dr
        k = self.loss_scale
        return k * (l_obj + l_cls + l_box), k * g

    def loss_and_grad(self, image, targets):
        if len(targets) == 0:
            raise EmptyTargetsError("detection_loss needs at least one target")
        loss, grads = self.loss_and_grad_batch(np.asarray(image)[None], [targets])
        return loss, grads

    def loss_and_grad_batch(self, images, targets_list):
        """Mean per-image loss over a batch, with its parameter gradient."""
        out = self.forward(images, keep_cache=True)
        n, gh, gw, _ = out.shape
        total = 0.0
        dout = np.zeros_like(out)
        for b in range(n):
            pos, cls, box = self.encode_targets(targets_list[b], gh, gw)
            l, g = self._loss_from_output(out[b], pos, cls, box)
            total += l
            dout[b] = g / n
        grads = self.backward(dout)
        return float(total / n), grads

    def loss_value(self, image, targets) -> float:
        out = self.forward(np.asarray(image)[None])
        pos, cls, box = self.encode_targets(targets, out.shape[1], out.shape[2])
        return float(self._loss_from_output(out[0], pos, cls, box)[0])

    # -- inference --------------------------------------------------------------

    def decode(self, out, height, width):
        """Decode one output map into (boxes, scores, classes) after NMS."""
        gh, gw = out.shape[:2]
        s = self.stride
        obj = _sigmoid(out[..., 0])
        lg = out[..., 1:1 + self.num_classes]
        ex = np.exp(lg - lg.max(axis=-1, keepdims=True))
        sm = ex / ex.sum(axis=-1, keepdims=True)
        cls = sm.argmax(axis=-1)
        score = obj * sm.max(axis=-1)
        keep = score >= self.score_floor
        if not keep.any():
            return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
        ii, jj = np.nonzero(keep)
        reg = out[ii, jj, 1 + self.num_classes:]
        cx = (jj + _sigmoid(reg[:, 0])) * s
        cy = (ii + _sigmoid(reg[:, 1])) * s
        bw = self.ref_size * np.exp(np.clip(reg[:, 2], -4.0, 4.0))
        bh = self.ref_size * np.exp(np.clip(reg[:, 3], -4.0, 4.0))
        boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
        scores = score[ii, jj].astype(np.float64)
        classes = cls[ii, jj]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, classes = boxes[valid], scores[valid], classes[valid]
        order = _accel.nms(boxes, scores, self.nms_iou)[: self.max_detections]
        return boxes[order], scores[order], classes[order]

    def infer(self, image):
        image = np.asarray(image)
        if image.ndim != 3:
            raise DimensionMismatchError(f"expected an (h, w, 3) raster, got {image.shape}")
        return self.infer_batch(image[None])[0]

    def infer_batch(self, images) -> list[list[Detection]]:
        images = np.asarray(images)
        out = self.forward(images)
        h, w = images.shape[1:3]
        results = []
        for b in range(out.shape[0]):
            boxes, scores, classes = self.decode(out[b], h, w)
            results.append([
                Detection(Box(*map(float, bx)), int(c), float(min(max(sc, 0.0), 1.0)))
                for bx, sc, c in zip(boxes, scores, classes)
            ])
        return results
