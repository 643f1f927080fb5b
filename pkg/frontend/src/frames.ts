/**
 * Frame payload decoding.
 *
 * raw-rgba8 frames carry premultiplied RGBA bytes; compositing them onto an
 * opaque page means painting the color channels as-is and forcing alpha
 * opaque.  PNG frames are handed to the browser's decoder via a data URL.
 */

import type { FrameImage } from "./protocol.js";

export interface DecodedFrame {
  width: number;
  height: number;
  /** Display-ready RGBA bytes (opaque), row-major. */
  rgba: Uint8ClampedArray;
}

export function base64ToBytes(data: string): Uint8Array {
  if (typeof atob === "function") {
    const binary = atob(data);
    const out = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) {
      out[i] = binary.charCodeAt(i);
    }
    return out;
  }
  // Node (tests)
  return new Uint8Array(Buffer.from(data, "base64"));
}

export class FrameDecodeError extends Error {}

export function decodeRawFrame(image: FrameImage): DecodedFrame {
  if (image.encoding !== "raw-rgba8") {
    throw new FrameDecodeError(`not a raw frame: ${image.encoding}`);
  }
  const bytes = base64ToBytes(image.data);
  const expected = image.width * image.height * 4;
  if (bytes.length !== expected) {
    throw new FrameDecodeError(
      `payload is ${bytes.length} bytes, expected ${expected} for ` +
        `${image.width}x${image.height}`,
    );
  }
  const rgba = new Uint8ClampedArray(expected);
  rgba.set(bytes);
  for (let i = 3; i < rgba.length; i += 4) {
    rgba[i] = 255; // premultiplied color over an opaque black page
  }
  return { width: image.width, height: image.height, rgba };
}

export function pngDataUrl(image: FrameImage): string {
  if (image.encoding !== "png") {
    throw new FrameDecodeError(`not a png frame: ${image.encoding}`);
  }
  return `data:image/png;base64,${image.data}`;
}
