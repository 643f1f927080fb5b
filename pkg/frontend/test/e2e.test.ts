/**
 * End-to-end: the view model drives a real gateway and simulation over a
 * live WebSocket.  The session must list, at least two distinct frames must
 * arrive and decode, a pause click must halt the step counter within one
 * render period, and submitted chain text must reach the simulation
 * verbatim (checked against its steering transcript).
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, existsSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import WebSocket from "ws";

import { ClientViewModel } from "../src/viewmodel.js";
import { decodeRawFrame } from "../src/frames.js";
import { parseServerMessage, ClientMessage, FrameMessage } from "../src/protocol.js";

const REPO_ROOT = resolve(__dirname, "..", "..");
const PYTHON = process.env.PYTHON ?? "python3";

let gateway: ChildProcess;
let harness: ChildProcess;
let simPort = 0;
let clientPort = 0;
let steeringLog = "";

function startGateway(): Promise<void> {
  return new Promise((resolvePorts, reject) => {
    gateway = spawn(
      PYTHON,
      ["-m", "insitu.gateway", "--sim-port", "0", "--client-port", "0",
       "--log-level", "info"],
      { cwd: REPO_ROOT, env: { ...process.env, PYTHONPATH: "src" } },
    );
    let buffer = "";
    const onData = (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/sim port (\d+), client port (\d+)/);
      if (match) {
        simPort = Number(match[1]);
        clientPort = Number(match[2]);
        resolvePorts();
      }
    };
    gateway.stderr!.on("data", onData);
    gateway.stdout!.on("data", onData);
    gateway.on("exit", (code) => reject(new Error(`gateway exited early: ${code}`)));
    setTimeout(() => reject(new Error(`gateway ports not seen in: ${buffer}`)), 15000);
  });
}

function startHarness(): void {
  steeringLog = join(mkdtempSync(join(tmpdir(), "steer-")), "transcript.jsonl");
  harness = spawn(
    PYTHON,
    ["-m", "insitu.harness",
     "--size", "8", "--ranks", "1", "--image", "32x18",
     "--steps", "2000", "--period", "1",
     "--gateway", `127.0.0.1:${simPort}`,
     "--steering-log", steeringLog],
    { cwd: REPO_ROOT, env: { ...process.env, PYTHONPATH: "src" } },
  );
}

interface Wired {
  vm: ClientViewModel;
  socket: WebSocket;
  waitFor: <T>(probe: () => T | null, timeoutMs?: number) => Promise<T>;
}

function connectClient(): Promise<Wired> {
  return new Promise((resolveClient, reject) => {
    const socket = new WebSocket(`ws://127.0.0.1:${clientPort}`);
    const vm = new ClientViewModel({
      send: (m: ClientMessage) => socket.send(JSON.stringify(m)),
    });
    socket.on("open", () => {
      vm.onStatus("connected");
      resolveClient({ vm, socket, waitFor });
    });
    socket.on("message", (data) => {
      const message = parseServerMessage(data.toString());
      if (message) {
        vm.onServerMessage(message);
      }
    });
    socket.on("error", reject);

    function waitFor<T>(probe: () => T | null, timeoutMs = 20000): Promise<T> {
      return new Promise((res, rej) => {
        const start = Date.now();
        const poll = () => {
          const value = probe();
          if (value !== null && value !== undefined && value !== false) {
            res(value as T);
          } else if (Date.now() - start > timeoutMs) {
            rej(new Error("timed out waiting for condition"));
          } else {
            setTimeout(poll, 25);
          }
        };
        poll();
      });
    }
  });
}

beforeAll(async () => {
  await startGateway();
  startHarness();
}, 30000);

afterAll(() => {
  harness?.kill();
  gateway?.kill();
});

describe("browser client against a live stack", () => {
  it("lists the session, shows frames, pauses, and steers a chain", async () => {
    const { vm, socket, waitFor } = await connectClient();

    // Session list arrives and the toy run is in it.
    const session = await waitFor(() =>
      vm.sessions.find((s) => s.name === "toy-shear-flow") ?? null,
    );
    expect(session.sources.map((s) => s.name)).toEqual([
      "density", "velocity", "current",
    ]);

    vm.observe(session.id);
    await waitFor(() => (vm.observed?.id === session.id ? true : null));

    // Two distinct frames decode to actual pixels.
    const first = await waitFor(() => vm.frames.take());
    const firstDecoded = decodeRawFrame((first as FrameMessage).image);
    expect(firstDecoded.width).toBe(32);
    const second = await waitFor(() => {
      const f = vm.frames.take() as FrameMessage | null;
      return f && f.step !== (first as FrameMessage).step ? f : null;
    });
    const secondDecoded = decodeRawFrame(second.image);
    expect(secondDecoded.rgba.length).toBe(32 * 18 * 4);
    expect(second.step).not.toBe((first as FrameMessage).step);

    // Pause halts the step counter within one render period.
    vm.pause();
    const pausedStep = await waitFor(async () => {
      // Wait until two consecutive frames report the same step.
      const a = vm.lastStep;
      await new Promise((r) => setTimeout(r, 300));
      return vm.lastStep === a && a >= 0 ? a : null;
    });
    await new Promise((r) => setTimeout(r, 500));
    expect(vm.lastStep).toBe(pausedStep);

    // Chain text reaches the simulation verbatim (transcript check).
    const chainText = "mul(0,1,0) | sum";
    vm.submitChain(1, chainText);
    await waitFor(() => {
      if (!existsSync(steeringLog)) {
        return null;
      }
      const lines = readFileSync(steeringLog, "utf-8").trim().split("\n");
      const hit = lines.some((line) => {
        try {
          const doc = JSON.parse(line);
          return doc.action === "set_functor_chain" && doc.text === chainText
            && doc.source_id === 1;
        } catch {
          return false;
        }
      });
      return hit ? true : null;
    });

    // Resume, then shut the run down cleanly.
    vm.resume();
    await waitFor(() => (vm.lastStep > pausedStep ? true : null));
    vm.exit();
    await waitFor(() => (harness.exitCode !== null ? true : null));
    expect(harness.exitCode).toBe(0);
    socket.close();
  }, 60000);
});
