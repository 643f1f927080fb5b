/**
 * Gateway wire protocol: newline-delimited JSON over a WebSocket.
 *
 * Message vocabulary mirrors the gateway: clients send list / observe /
 * steer, and receive sessions / observing / frame / error.  Steering
 * payloads are relayed verbatim to the simulation, so the builders here are
 * the single source of truth for what the UI emits.
 */

export interface SourceInfo {
  name: string;
  feature_dim: number;
}

export interface SessionInfo {
  id: number;
  name: string;
  ranks: number;
  sources: SourceInfo[];
}

export interface FrameImage {
  width: number;
  height: number;
  encoding: string;
  data: string; // base64
}

export interface SceneEcho {
  version: number;
  camera: {
    position: number[];
    look_at: number[];
    up: number[];
    vertical_fov: number;
    image_size: number[];
  };
  settings: {
    active_set: number[];
    interpolation: boolean;
    step_length: number;
    [key: string]: unknown;
  };
  chain_texts: Record<string, string>;
  value_ranges: Record<string, number[]>;
  render_period: number;
  [key: string]: unknown;
}

export interface FrameMessage {
  type: "frame";
  step: number;
  image: FrameImage;
  metadata: Record<string, unknown>;
  scene?: SceneEcho;
}

export type ServerMessage =
  | { type: "sessions"; sessions: SessionInfo[] }
  | { type: "observing"; session_id: number }
  | { type: "registered"; session_id: number }
  | { type: "error"; error: string }
  | FrameMessage;

export function parseServerMessage(raw: string): ServerMessage | null {
  try {
    const doc = JSON.parse(raw);
    if (doc && typeof doc.type === "string") {
      return doc as ServerMessage;
    }
    return null;
  } catch {
    return null;
  }
}

export type SteerPayload = Record<string, unknown> & { action: string };

export interface ClientMessage {
  type: "list" | "observe" | "steer";
  [key: string]: unknown;
}

export const listSessions = (): ClientMessage => ({ type: "list" });

export const observeSession = (sessionId: number): ClientMessage => ({
  type: "observe",
  session_id: sessionId,
});

export const steer = (payload: SteerPayload): ClientMessage => ({
  type: "steer",
  payload,
});

export const pauseSim = () => steer({ action: "pause" });
export const resumeSim = () => steer({ action: "resume" });
export const stepSim = () => steer({ action: "step" });
export const exitSim = () => steer({ action: "exit" });

export const setPeriod = (value: number) => steer({ action: "set_period", value });

export const setActiveSources = (ids: number[]) =>
  steer({ action: "set_active_sources", ids });

export const setFunctorChain = (sourceId: number, text: string) =>
  steer({ action: "set_functor_chain", source_id: sourceId, text });

export const setRange = (sourceId: number, min: number, max: number) =>
  steer({ action: "set_range", source_id: sourceId, min, max });

export const setCamera = (position: number[], lookAt: number[], up: number[]) =>
  steer({ action: "set_camera", position, look_at: lookAt, up });

export const setTransferFunction = (sourceId: number, points: number[][]) =>
  steer({ action: "set_transfer_function", source_id: sourceId, points });
