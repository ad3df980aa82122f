/**
 * Protocol client that lets an arbitrary training command serve trials.
 *
 * The adapter registers with the manager as an "external" worker. For every
 * assignment it writes trial_<id>_assignment.json into the workdir, runs the
 * user's command through the shell, and reports the command's result file
 * back over the socket. The files carry the wire protocol's field names and
 * the manager's values verbatim, so a training script never has to speak the
 * socket protocol itself.
 *
 * One command runs at a time per adapter; start several adapters for
 * parallelism.
 */
import { spawn } from "node:child_process";
import { once } from "node:events";
import * as fs from "node:fs/promises";
import * as net from "node:net";
import * as path from "node:path";
import * as readline from "node:readline";

import { parse as losslessParse, stringify as losslessStringify } from "lossless-json";

import {
  Message,
  ProtocolError,
  encodeLine,
  errorMessage,
  heartbeatMessage,
  parseLine,
  registerMessage,
  resultMessage,
  validateMessage,
} from "./protocol.js";

export class AdapterError extends Error {}

export interface ManagerAddress {
  host: string;
  port: number;
}

export interface AdapterConfig {
  manager: ManagerAddress;
  workerId: string;
  /** Shell command run per assignment; must reference every required placeholder. */
  cmdTemplate: string;
  /** Directory where assignment and result files are materialized. */
  workdir: string;
  /** Kill the command after this many seconds (default: the assignment's own timeout_seconds). */
  timeoutSeconds?: number;
  /** Heartbeat cadence while a command is running (default 10s). */
  heartbeatSeconds?: number;
}

export const REQUIRED_PLACEHOLDERS = ["{assignment}", "{result}"] as const;

export function validateTemplate(template: string): void {
  const missing = REQUIRED_PLACEHOLDERS.filter((p) => !template.includes(p));
  if (missing.length > 0) {
    throw new AdapterError(
      `command template must reference ${missing.join(" and ")}`,
    );
  }
}

export interface CommandFields {
  assignment: string;
  result: string;
  trialId: number;
}

export function renderCommand(template: string, fields: CommandFields): string {
  return template
    .replaceAll("{assignment}", fields.assignment)
    .replaceAll("{result}", fields.result)
    .replaceAll("{trial_id}", String(fields.trialId));
}

export interface CommandResult {
  minValMse: number;
  bestEpoch: number;
  epochsRun: number;
  paramCount: number;
}

function requirePositiveInt(obj: Record<string, unknown>, field: string): number {
  const value = obj[field];
  if (typeof value !== "number" || !Number.isInteger(value) || value < 1) {
    throw new AdapterError(`field '${field}' must be a positive integer`);
  }
  return value;
}

/**
 * Parse and validate the command's result file.
 *
 * Requires min_val_mse, epochs_run and param_count; best_epoch defaults to
 * epochs_run when the training script does not track it separately.
 */
export function parseResultFile(text: string): CommandResult {
  let value: unknown;
  try {
    value = JSON.parse(text);
  } catch {
    throw new AdapterError("not valid JSON");
  }
  if (value === null || typeof value !== "object" || Array.isArray(value)) {
    throw new AdapterError("must hold a JSON object");
  }
  const obj = value as Record<string, unknown>;
  const minValMse = obj["min_val_mse"];
  if (typeof minValMse !== "number" || !Number.isFinite(minValMse)) {
    throw new AdapterError("field 'min_val_mse' must be a finite number");
  }
  const epochsRun = requirePositiveInt(obj, "epochs_run");
  const paramCount = requirePositiveInt(obj, "param_count");
  const bestEpoch =
    obj["best_epoch"] === undefined
      ? epochsRun
      : requirePositiveInt(obj, "best_epoch");
  return { minValMse, bestEpoch, epochsRun, paramCount };
}

function isConnectionDrop(error: unknown): boolean {
  const code = (error as NodeJS.ErrnoException)?.code;
  return code === "ECONNRESET" || code === "EPIPE";
}

/**
 * Turn a raw assign line into the assignment file's content.
 *
 * Works on the line's text, not on JSON.parse output: seed fields are
 * unsigned 64-bit integers whose low digits a double cannot hold, and the
 * training command is entitled to the exact values the manager sent.
 */
export function assignmentFileText(rawAssignLine: string): string {
  const obj = losslessParse(rawAssignLine) as Record<string, unknown>;
  delete obj["type"];
  delete obj["v"];
  const text = losslessStringify(obj);
  if (text === undefined) {
    throw new ProtocolError("assignment is not serializable");
  }
  return text + "\n";
}

/**
 * Serve assignments until the manager drains the queue or disappears.
 *
 * Returns the process exit code: 0 after a drain or a lost manager (both
 * are normal ends of a session), 1 when the manager rejects the worker.
 * Connection refusal surfaces as the socket's error.
 */
export async function runAdapter(config: AdapterConfig): Promise<number> {
  validateTemplate(config.cmdTemplate);
  await fs.mkdir(config.workdir, { recursive: true });

  const socket = net.connect(config.manager.port, config.manager.host);
  socket.setNoDelay(true);
  await once(socket, "connect");
  // after this point a dying socket means the manager went away, which
  // ends the session cleanly rather than crashing the adapter
  socket.on("error", () => {});

  const send = (msg: Message) => {
    if (!socket.destroyed) {
      socket.write(encodeLine(msg));
    }
  };
  send(registerMessage(config.workerId, ["external"]));

  const lines = readline.createInterface({ input: socket, crlfDelay: Infinity });
  try {
    for await (const line of lines) {
      if (!line.trim()) {
        continue;
      }
      const msg = validateMessage(parseLine(line));
      if (msg.type === "assign") {
        await handleAssignment(msg, line, config, send);
      } else if (msg.type === "drain") {
        socket.end();
        return 0;
      } else if (msg.type === "reject") {
        console.error(`manager rejected worker: ${msg.code}: ${msg.reason}`);
        socket.destroy();
        return 1;
      }
    }
  } catch (error) {
    if (!isConnectionDrop(error)) {
      throw error;
    }
  } finally {
    lines.close();
    socket.destroy();
  }
  return 0;
}

async function handleAssignment(
  msg: Message,
  rawLine: string,
  config: AdapterConfig,
  send: (msg: Message) => void,
): Promise<void> {
  const trialId = msg.trial_id as number;
  const assignmentPath = path.join(
    config.workdir,
    `trial_${trialId}_assignment.json`,
  );
  const resultPath = path.join(config.workdir, `trial_${trialId}_result.json`);
  await fs.writeFile(assignmentPath, assignmentFileText(rawLine));
  // a stale file from an earlier attempt must never pass as this run's output
  await fs.rm(resultPath, { force: true });

  const command = renderCommand(config.cmdTemplate, {
    assignment: assignmentPath,
    result: resultPath,
    trialId,
  });
  const timeoutSeconds =
    config.timeoutSeconds ??
    (typeof msg.timeout_seconds === "number" ? msg.timeout_seconds : 3600);

  const started = Date.now();
  // detached puts the shell in its own process group so a timeout can kill
  // the whole command tree, not just the shell
  const child = spawn(command, {
    shell: true,
    stdio: ["ignore", "ignore", "pipe"],
    detached: true,
  });
  let stderrTail = "";
  child.stderr?.on("data", (chunk: Buffer) => {
    stderrTail = (stderrTail + chunk.toString("utf8")).slice(-2000);
  });

  const heartbeat = setInterval(
    () => send(heartbeatMessage(config.workerId)),
    (config.heartbeatSeconds ?? 10) * 1000,
  );
  let timedOut = false;
  const killer = setTimeout(() => {
    timedOut = true;
    try {
      if (child.pid !== undefined) {
        process.kill(-child.pid, "SIGKILL");
      } else {
        child.kill("SIGKILL");
      }
    } catch {
      child.kill("SIGKILL");
    }
  }, timeoutSeconds * 1000);

  const exitCode = await new Promise<number | null>((resolve) => {
    child.once("error", () => resolve(null));
    child.once("close", (code) => resolve(code));
  });
  clearTimeout(killer);
  clearInterval(heartbeat);
  const wallSeconds = (Date.now() - started) / 1000;

  if (timedOut) {
    send(errorMessage(trialId, `command timed out after ${timeoutSeconds}s`));
    return;
  }
  if (exitCode !== 0) {
    const excerpt = stderrTail.trim().slice(-400);
    send(
      errorMessage(
        trialId,
        `command exited with code ${String(exitCode)}` +
          (excerpt ? `: ${excerpt}` : ""),
      ),
    );
    return;
  }

  let result: CommandResult;
  try {
    result = parseResultFile(await fs.readFile(resultPath, "utf8"));
  } catch (error) {
    const reason =
      error instanceof AdapterError
        ? error.message
        : `unreadable: ${error instanceof Error ? error.message : String(error)}`;
    send(
      errorMessage(trialId, `result file ${path.basename(resultPath)}: ${reason}`),
    );
    return;
  }
  send(
    resultMessage(
      trialId,
      result.minValMse,
      result.bestEpoch,
      result.epochsRun,
      result.paramCount,
      wallSeconds,
    ),
  );
}
