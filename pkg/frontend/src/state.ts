// UI state and the controller that keeps it mirrored with the server.

import {
  AlphaParam,
  ApiError,
  ChatApi,
  ChatResponse,
  GENDERS,
  PersonaJson,
} from './api.js';

export interface Bubble {
  role: 'user' | 'agent';
  text: string;
  alphaUsed?: number;
  alphaSource?: 'predicted' | 'fixed';
}

export type AlphaControl = { mode: 'auto' } | { mode: 'manual'; value: number };

export interface UiState {
  sessionId: string | null;
  transcript: Bubble[];
  persona: PersonaJson;
  alpha: AlphaControl;
  pending: boolean;
  error: string | null;
  sessionLost: boolean;
}

export interface ComparePane {
  alpha: number;
  response: string;
  alphaUsed: number;
}

export function initialState(): UiState {
  return {
    sessionId: null,
    transcript: [],
    persona: { gender: 'unspecified', location: 'ashvale', tags: [] },
    alpha: { mode: 'auto' },
    pending: false,
    error: null,
    sessionLost: false,
  };
}

export function alphaParam(state: UiState): AlphaParam {
  return state.alpha.mode === 'auto' ? 'auto' : state.alpha.value;
}

export function validatePersonaForm(p: PersonaJson): string | null {
  if (!GENDERS.includes(p.gender as (typeof GENDERS)[number])) {
    return `gender must be one of ${GENDERS.join(', ')}`;
  }
  if (!p.location) return 'location must not be empty';
  if (p.tags.some((t) => !t.trim())) return 'tags must not contain empty entries';
  return null;
}

export class ChatController {
  state: UiState = initialState();

  constructor(private readonly api: ChatApi) {}

  async start(persona?: PersonaJson): Promise<void> {
    const info = await this.api.createSession(persona);
    this.state.sessionId = info.session_id;
    this.state.persona = info.persona;
    this.state.sessionLost = false;
    this.state.error = null;
  }

  /** Send one message; the transcript only changes on success. */
  async send(text: string): Promise<ChatResponse | null> {
    if (this.state.pending || !this.state.sessionId) return null;
    this.state.pending = true;
    this.state.error = null;
    try {
      const resp = await this.api.chat(this.state.sessionId, text, alphaParam(this.state));
      this.state.transcript.push({ role: 'user', text });
      this.state.transcript.push({
        role: 'agent',
        text: resp.response,
        alphaUsed: resp.alpha_used,
        alphaSource: resp.alpha_source,
      });
      return resp;
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        // evicted server session: keep the local transcript, offer a restart
        this.state.sessionLost = true;
        this.state.error = 'session expired on the server; start a new session to continue';
      } else {
        this.state.error = err instanceof Error ? err.message : String(err);
      }
      return null;
    } finally {
      this.state.pending = false;
    }
  }

  /** Push the edited persona to the server; state mirrors the server reply. */
  async updatePersona(persona: PersonaJson): Promise<boolean> {
    const problem = validatePersonaForm(persona);
    if (problem) {
      this.state.error = problem;
      return false;
    }
    if (!this.state.sessionId) return false;
    try {
      const reply = await this.api.setPersona(this.state.sessionId, persona);
      this.state.persona = reply.persona;
      this.state.error = null;
      return true;
    } catch (err) {
      this.state.error = err instanceof Error ? err.message : String(err);
      return false;
    }
  }

  /**
   * Side-by-side answers for the same message at alpha 0 and 1, on two
   * forked sessions carrying the current persona. The main transcript is
   * untouched.
   */
  async compare(text: string): Promise<[ComparePane, ComparePane] | null> {
    this.state.error = null;
    try {
      const [zero, one] = await Promise.all(
        [0, 1].map(async (alpha) => {
          const fork = await this.api.createSession(this.state.persona);
          const resp = await this.api.chat(fork.session_id, text, alpha);
          return { alpha, response: resp.response, alphaUsed: resp.alpha_used };
        }),
      );
      return [zero, one];
    } catch (err) {
      this.state.error = err instanceof Error ? err.message : String(err);
      return null;
    }
  }

  /** Re-sync the transcript from the server (the server owns the history). */
  async refresh(): Promise<void> {
    if (!this.state.sessionId) return;
    const remote = await this.api.getSession(this.state.sessionId);
    this.state.transcript = remote.transcript.map((t) => ({
      role: t.role,
      text: t.text,
      alphaUsed: t.alpha_used,
    }));
    this.state.persona = remote.persona;
  }
}
