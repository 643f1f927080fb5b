/**
 * One-slot latest-value mailbox.
 *
 * The socket handler puts every incoming frame here; the render loop takes
 * whatever is newest when it gets around to painting.  Frames that were
 * replaced before anyone took them count as dropped, matching the gateway's
 * own newest-frame-wins policy.
 */
export class Mailbox<T> {
  private slot: T | null = null;
  dropped = 0;

  put(value: T): void {
    if (this.slot !== null) {
      this.dropped += 1;
    }
    this.slot = value;
  }

  take(): T | null {
    const value = this.slot;
    this.slot = null;
    return value;
  }

  peek(): T | null {
    return this.slot;
  }
}
