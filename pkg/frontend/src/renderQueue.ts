import { RenderRequest } from "./types";

export interface QueueOptions {
  debounceMs?: number;
  maxInFlight?: number;
  now?: () => number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

type RenderFn = (req: RenderRequest, seq: number) => Promise<Blob>;
type DisplayFn = (blob: Blob, seq: number) => void;

// Debounces render submissions, caps concurrent requests, and discards
// responses that arrive after a newer request has already been displayed.
export class RenderQueue {
  private seq = 0;
  private displayedSeq = 0;
  private inFlight = 0;
  private pending: RenderRequest | null = null;
  private timer: unknown = null;
  private readonly debounceMs: number;
  private readonly maxInFlight: number;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;

  constructor(
    private renderFn: RenderFn,
    private displayFn: DisplayFn,
    private onError: (err: unknown) => void = () => {},
    options: QueueOptions = {},
  ) {
    this.debounceMs = options.debounceMs ?? 150;
    this.maxInFlight = options.maxInFlight ?? 4;
    this.setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = options.clearTimer ?? ((h) => clearTimeout(h as number));
  }

  get inFlightCount(): number {
    return this.inFlight;
  }

  submit(req: RenderRequest): void {
    this.pending = req;
    if (this.timer !== null) {
      this.clearTimer(this.timer);
    }
    this.timer = this.setTimer(() => {
      this.timer = null;
      this.flush();
    }, this.debounceMs);
  }

  private flush(): void {
    if (this.pending === null) {
      return;
    }
    if (this.inFlight >= this.maxInFlight) {
      // Leave the request pending; the next completion re-flushes.
      return;
    }
    const req = this.pending;
    this.pending = null;
    const seq = ++this.seq;
    this.inFlight += 1;
    this.renderFn(req, seq)
      .then((blob) => {
        // Stale responses (superseded by a newer displayed frame) are dropped.
        if (seq > this.displayedSeq) {
          this.displayedSeq = seq;
          this.displayFn(blob, seq);
        }
      })
      .catch((err) => this.onError(err))
      .finally(() => {
        this.inFlight -= 1;
        this.flush();
      });
  }
}
